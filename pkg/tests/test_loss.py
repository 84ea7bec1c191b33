import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msacod.loss import EPS, as_target, bce_loss, iou_loss, resize_nearest, total_loss
from msacod.tensor import Tape, Tensor, TensorError

from oracles import finite_diff


def bce_ref(p, g):
    tot = 0.0
    for a, b in zip(p.reshape(-1), g.reshape(-1)):
        a = min(max(a, EPS), 1 - EPS)
        tot -= b * math.log(a) + (1 - b) * math.log(1 - a)
    return tot / p.size


def iou_ref(p, g):
    inter = sum(a * b for a, b in zip(p.reshape(-1), g.reshape(-1)))
    union = sum(a + b - a * b for a, b in zip(p.reshape(-1), g.reshape(-1)))
    return 1 - (inter + 1) / (union + 1)


@pytest.fixture
def pair():
    rng = np.random.default_rng(4)
    return rng.uniform(size=(1, 6, 6)), (rng.uniform(size=(1, 6, 6)) > 0.5).astype(float)


class TestTerms:
    def test_bce(self, pair):
        p, g = pair
        assert bce_loss(Tensor(p), Tensor(g)).item() == pytest.approx(bce_ref(p, g), rel=1e-12)

    def test_iou(self, pair):
        p, g = pair
        assert iou_loss(Tensor(p), Tensor(g)).item() == pytest.approx(iou_ref(p, g), rel=1e-12)

    def test_half_prediction_bce_is_log2(self):
        g = np.zeros((1, 3, 3))
        g[0, 0] = 1
        assert bce_loss(Tensor(np.full((1, 3, 3), 0.5)), Tensor(g)).item() == pytest.approx(math.log(2))

    def test_perfect_prediction(self):
        g = np.zeros((1, 4, 4))
        g[0, :2] = 1
        assert iou_loss(Tensor(g), Tensor(g)).item() == 0.0
        assert bce_loss(Tensor(g), Tensor(g)).item() == pytest.approx(-math.log(1 - EPS), rel=1e-6)

    def test_saturated_prediction_is_finite(self):
        g = np.ones((1, 2, 2))
        val = bce_loss(Tensor(np.zeros((1, 2, 2))), Tensor(g)).item()
        assert val == pytest.approx(-math.log(EPS))

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            bce_loss(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2))))

    def test_gradients(self, pair):
        p0, g = pair
        for fn in (bce_loss, iou_loss):
            p = Tensor(p0.copy(), requires_grad=True)
            with Tape() as tape:
                loss = fn(p, Tensor(g))
            tape.backward(loss)
            want = finite_diff(lambda a: fn(Tensor(a), Tensor(g)).item(), p0.copy())
            np.testing.assert_allclose(p.grad, want, atol=1e-7)


class TestTotal:
    def test_sum_of_ten_terms(self):
        rng = np.random.default_rng(0)
        g = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        preds = [Tensor(rng.uniform(size=(1, 8, 8))) for _ in range(5)]
        rep = total_loss(preds, g)
        want = sum(bce_ref(p.data, g[None]) + iou_ref(p.data, g[None]) for p in preds)
        assert rep.total.item() == pytest.approx(want, rel=1e-12)
        assert len(rep.terms()) == 10
        d = rep.as_dict()
        assert set(d) == {f"{k}{i}" for k in ("bce", "iou") for i in range(1, 6)} | {"total"}

    def test_needs_five_predictions(self):
        with pytest.raises(ValueError):
            total_loss([Tensor(np.zeros((1, 2, 2)))] * 4, np.zeros((2, 2)))

    def test_level_subset(self):
        preds = [Tensor(np.full((1, 2, 2), 0.5))] * 5
        rep = total_loss(preds, np.zeros((2, 2)), levels=(1,))
        assert rep.total.item() == pytest.approx(math.log(2) + iou_ref(np.full(4, 0.5), np.zeros(4)))

    def test_target_resized(self):
        g = np.zeros((4, 4))
        g[:2] = 1
        t = as_target(g, 2, 2)
        np.testing.assert_array_equal(t.data, [[[1, 1], [0, 0]]])

    @settings(max_examples=30, deadline=None)
    @given(m=arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0])), n=st.integers(1, 12))
    def test_nearest_resize_keeps_binary(self, m, n):
        out = resize_nearest(m, n, n)
        assert set(np.unique(out)) <= {0.0, 1.0}

    @settings(max_examples=30, deadline=None)
    @given(p=arrays(np.float64, (1, 4, 4), elements=st.floats(0, 1)),
           g=arrays(np.float64, (1, 4, 4), elements=st.sampled_from([0.0, 1.0])))
    def test_terms_non_negative(self, p, g):
        assert bce_loss(Tensor(p), Tensor(g)).item() >= 0
        assert 0 <= iou_loss(Tensor(p), Tensor(g)).item() <= 1
