import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msacod import metrics as M

import oracles as O


def random_pair(rng, size=16):
    p = rng.uniform(size=(size, size))
    kind = rng.integers(4)
    if kind == 1:
        p = np.round(p)
    elif kind == 2:
        p = np.round(p * 255) / 255
    g = (rng.uniform(size=(size, size)) < rng.uniform(0.05, 0.7)).astype(float)
    if kind == 3:
        g = np.zeros((size, size))
        y, x = rng.integers(0, size // 2, 2)
        g[y : y + size // 3, x : x + size // 2] = 1
    return p, g


@pytest.fixture
def rng():
    return np.random.default_rng(99)


@pytest.fixture
def rect_gt():
    g = np.zeros((32, 32))
    g[8:24, 6:26] = 1.0
    return g


unit_maps = arrays(np.float64, (8, 8), elements=st.floats(0, 1, allow_nan=False))
binary_maps = arrays(np.float64, (8, 8), elements=st.sampled_from([0.0, 1.0]))


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(12))
    def test_scalar_metrics(self, seed):
        p, g = random_pair(np.random.default_rng(seed))
        assert M.mae(p, g) == pytest.approx(O.mae_naive(p, g), abs=1e-12)
        assert M.s_measure(p, g) == pytest.approx(O.s_measure_naive(p, g), abs=1e-12)
        assert M.adaptive_emeasure(p, g) == pytest.approx(O.emeasure_naive(p, g), abs=1e-12)
        assert M.weighted_fmeasure(p, g) == pytest.approx(O.weighted_f_naive(p, g), abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_curves(self, seed):
        p, g = random_pair(np.random.default_rng(100 + seed))
        c = M.pr_and_fbeta_curves(p, g)
        pr, rc, fb = O.curves_naive(p, g)
        np.testing.assert_allclose(c.precision, pr, atol=1e-12)
        np.testing.assert_allclose(c.recall, rc, atol=1e-12)
        np.testing.assert_allclose(c.fbeta, fb, atol=1e-12)

    @pytest.mark.parametrize("k", [3, 4, 15, 30])
    def test_border_region(self, rng, k):
        for _ in range(4):
            _, g = random_pair(rng)
            np.testing.assert_array_equal(M.border_region(g, k), O.border_region_naive(g, k))

    def test_border_metrics(self, rng):
        for _ in range(4):
            p, g = random_pair(rng)
            reg = O.border_region_naive(g, 3)
            br = M.br_metrics(p, g, 3)
            assert br.wf == pytest.approx(O.weighted_f_naive(p, g, reg), abs=1e-12)
            assert br.mae == pytest.approx(np.abs(p - g)[reg].mean(), abs=1e-12)

    def test_nearest_foreground_tie_break(self, rng):
        # only pixels reachable through the Gaussian window matter; compare those
        for _ in range(5):
            g = rng.uniform(size=(12, 12)) < 0.15
            g[0, 0] = True
            err = rng.uniform(size=g.shape)
            got = M._propagate_fg_error(err, g)
            _, idx = O.nearest_fg_naive(g)
            reach = M.dilate(g, 7)
            want = err[idx[..., 0], idx[..., 1]]
            np.testing.assert_array_equal(got[reach], want[reach])

    def test_gaussian_kernel(self):
        np.testing.assert_allclose(M.matlab_gaussian(), O.matlab_gauss_naive(), atol=1e-15)


class TestExactMatch:
    def test_binary_self_match(self, rect_gt):
        g = rect_gt
        assert M.mae(g, g) == 0.0
        assert M.s_measure(g, g) == pytest.approx(1.0, abs=1e-12)
        assert M.weighted_fmeasure(g, g) == pytest.approx(1.0, abs=1e-12)
        assert M.adaptive_emeasure(g, g) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("fill", [0.0, 1.0])
    def test_constant_self_match(self, fill):
        g = np.full((10, 10), fill)
        assert M.mae(g, g) == 0.0
        assert M.s_measure(g, g) == 1.0
        assert M.weighted_fmeasure(g, g) == 1.0
        assert M.adaptive_emeasure(g, g) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(g=binary_maps)
    def test_any_binary_self_match(self, g):
        for score in (M.s_measure(g, g), M.weighted_fmeasure(g, g), M.adaptive_emeasure(g, g)):
            assert score == pytest.approx(1.0, abs=1e-12)


class TestKnownValues:
    def test_mae_hand(self):
        p = np.array([[0.2, 0.8], [1.0, 0.0]])
        g = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert M.mae(p, g) == pytest.approx((0.2 + 0.2 + 1.0 + 0.0) / 4)

    def test_gt_binarised_at_half(self):
        p = np.zeros((1, 2))
        assert M.mae(p, np.array([[0.49, 0.5]])) == pytest.approx(0.5)

    def test_s_measure_empty_gt(self):
        p = np.full((4, 4), 0.25)
        assert M.s_measure(p, np.zeros((4, 4))) == pytest.approx(0.75)

    def test_s_measure_full_gt(self):
        p = np.full((4, 4), 0.25)
        assert M.s_measure(p, np.ones((4, 4))) == pytest.approx(0.25)

    def test_inverted_prediction_scores_low(self, rect_gt):
        inv = 1.0 - rect_gt
        assert M.s_measure(inv, rect_gt) < 0.1
        assert M.weighted_fmeasure(inv, rect_gt) < 0.05
        assert M.mae(inv, rect_gt) == 1.0

    def test_weighted_f_empty_gt(self):
        z = np.zeros((5, 5))
        assert M.weighted_fmeasure(z, z) == 1.0
        p = z.copy()
        p[2, 2] = 0.1
        assert M.weighted_fmeasure(p, z) == 0.0

    def test_emeasure_zero_prediction(self, rect_gt):
        z = np.zeros_like(rect_gt)
        assert M.adaptive_emeasure(z, np.zeros_like(z)) == 1.0
        # the binarised prediction is constant, so the alignment is 0 and every pixel scores 1/4
        assert M.adaptive_emeasure(z, rect_gt) == pytest.approx(0.25, abs=1e-15)

    def test_adaptive_threshold_capped(self):
        assert M.adaptive_threshold(np.full((2, 2), 0.8)) == 1.0
        assert M.adaptive_threshold(np.full((2, 2), 0.2)) == pytest.approx(0.4)

    def test_curve_empty_prediction_precision_is_one(self, rect_gt):
        c = M.pr_and_fbeta_curves(np.zeros_like(rect_gt), rect_gt)
        assert np.all(c.precision == 1.0)
        assert np.all(c.recall == 0.0)
        assert np.all(c.fbeta == 0.0)

    def test_curve_length_and_thresholds(self, rect_gt):
        c = M.pr_and_fbeta_curves(rect_gt, rect_gt)
        assert c.thresholds.shape == (256,)
        assert c.thresholds[0] == 0.0 and c.thresholds[-1] == 1.0
        # pred > 1 is never true, so the last threshold is empty
        assert c.recall[-1] == 0.0 and c.recall[0] == 1.0


class TestBorderRegion:
    def test_rectangle_band_area(self, rect_gt):
        # boundary ring of a 16x20 rectangle; a 3x3 dilation widens it by one pixel each way
        ring = M.object_boundary(rect_gt)
        assert ring.sum() == 2 * (16 + 20) - 4
        band = M.border_region(rect_gt, 3)
        assert band.sum() == 18 * 22 - 12 * 16

    def test_monotone_in_kernel(self, rect_gt):
        assert np.all(M.border_region(rect_gt, 15) <= M.border_region(rect_gt, 30))

    def test_empty_gt_region_is_flagged(self):
        z = np.zeros((8, 8))
        br = M.br_metrics(z, z, 15)
        assert br.empty and (br.wf, br.mae) == (1.0, 0.0)

    def test_dilate_rejects_bad_kernel(self):
        with pytest.raises(M.MetricError):
            M.dilate(np.ones((3, 3)), 0)


class TestValidation:
    def test_size_mismatch(self):
        with pytest.raises(M.MetricError, match="differ"):
            M.mae(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_unknown_metric(self):
        with pytest.raises(M.MetricError):
            M.evaluate_pair(np.zeros((4, 4)), np.zeros((4, 4)), metrics=["fm"])

    def test_gray_map(self):
        gm = M.GrayMap(np.array([[0.0, 0.3], [1.0, 1.2]]))
        assert gm.values.max() == 1.0
        assert gm.non_binary_pixels == 1
        with pytest.raises(M.MetricError):
            M.GrayMap(np.zeros(3))


class TestAggregate:
    def test_mean_in_order(self, rng):
        reps = [M.evaluate_pair(*random_pair(rng), name=str(i), border_kernels=(15,)) for i in range(3)]
        agg = M.aggregate(reps)
        for k in agg.means:
            assert agg.means[k] == pytest.approx(sum(r.scores[k] for r in reps) / 3)
        np.testing.assert_allclose(agg.curves.fbeta, np.mean([r.curves.fbeta for r in reps], axis=0))

    def test_empty_rejected(self):
        with pytest.raises(M.MetricError):
            M.aggregate([])


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(p=unit_maps, g=binary_maps)
    def test_scores_in_unit_interval(self, p, g):
        for s in (M.mae(p, g), M.s_measure(p, g), M.weighted_fmeasure(p, g), M.adaptive_emeasure(p, g)):
            assert -1e-12 <= s <= 1 + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(p=unit_maps, g=binary_maps)
    def test_recall_non_increasing(self, p, g):
        c = M.pr_and_fbeta_curves(p, g)
        assert np.all(np.diff(c.recall) <= 0)

    @settings(max_examples=40, deadline=None)
    @given(g=binary_maps, k=st.integers(1, 9))
    def test_region_contains_boundary_and_grows(self, g, k):
        ring = M.object_boundary(g)
        small = M.border_region(g, k)
        big = M.border_region(g, k + 2)
        assert np.all(small[ring])
        assert np.all(small <= big)
