import warnings

import numpy as np
import pytest

from msacod import tensor as T
from msacod.attention import HeadGroupConfig
from msacod.model import (
    STRIDES,
    ConfigError,
    Model,
    ModelConfig,
    format_config,
    parse_config_text,
)
from msacod.tensor import Tensor

from oracles import bilinear_naive, conv2d_naive


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@pytest.fixture(scope="module")
def micro():
    return Model(ModelConfig.micro())


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(3).uniform(size=(3, 64, 64))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.cd == 128 and cfg.heads == HeadGroupConfig(2, 2, 4)

    def test_indivisible_input(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_size=(100, 96))

    def test_heads_must_divide_cd(self):
        with pytest.raises(ConfigError):
            ModelConfig.micro(cd=7)

    def test_off_grid_width_warns(self):
        with pytest.warns(UserWarning):
            ModelConfig(cd=48, heads=HeadGroupConfig(1, 1, 1))

    def test_round_trip(self):
        cfg = ModelConfig.micro(seed=11, mask_grad=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert parse_config_text(format_config(cfg)) == cfg

    def test_comments_and_unknown_keys(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = parse_config_text("# micro\ninput_size=64x64\ncd=6\nheads_fta=1\nheads_bta=1\nheads_ta=1\n")
        assert cfg.input_size == (64, 64)
        with pytest.raises(ConfigError, match="unknown"):
            parse_config_text("depth=3\n")
        with pytest.raises(ConfigError):
            parse_config_text("cd=abc\n")
        with pytest.raises(ConfigError):
            parse_config_text("just words\n")


class TestShapeLadder:
    @pytest.mark.parametrize("size", [64, 96])
    def test_strides(self, size):
        model = Model(ModelConfig.micro(input_size=(size, size)))
        img = Tensor(np.random.default_rng(0).uniform(size=(3, size, size)))
        tr = model.run(img)
        for lvl, stride in enumerate(STRIDES, 1):
            assert tr.pyramid[lvl].shape[1:] == (size // stride, size // stride)
        for d, e in zip(tr.decoded, tr.pyramid.levels):
            assert d.shape == e.shape
        for i, p in enumerate(tr.preds.native):
            assert p.shape == (1, size // STRIDES[i], size // STRIDES[i])
        for p in tr.preds.upsampled:
            assert p.shape == (1, size, size)

    def test_non_square(self):
        model = Model(ModelConfig.micro(input_size=(64, 96)))
        preds = model(Tensor(np.zeros((3, 64, 96))))
        assert preds.upsampled[4].shape == (1, 64, 96)
        assert preds.native[4].shape == (1, 2, 3)

    def test_bad_image(self, micro):
        with pytest.raises(ConfigError):
            micro(Tensor(np.zeros((3, 60, 64))))
        with pytest.raises(ConfigError):
            micro(Tensor(np.zeros((64, 64))))


class TestDecoder:
    def test_zero_weights_give_half(self):
        model = Model(ModelConfig.micro(init="zero"))
        preds = model(Tensor(np.random.default_rng(0).uniform(size=(3, 64, 64))))
        for p in preds.upsampled + preds.native:
            np.testing.assert_array_equal(p.data, 0.5)

    def test_fusion_equations(self, micro, image):
        calls = []

        def spy(x, mask, w):
            calls.append((x.data.copy(), mask.data.copy()))
            return T.scale(x, 0.5)

        tr = micro.run(Tensor(image), msa_fn=spy)
        e = [lvl.data for lvl in tr.pyramid.levels]
        heads = micro.decoder.heads

        def head(i, feat):
            h = heads[i - 1]
            return conv2d_naive(feat, h.weight.data, h.bias.data)

        def up(x, like):
            return bilinear_naive(x, *like.shape[1:])

        p5 = sigmoid(head(5, e[4]))
        d4 = 0.5 * e[4] * up(e[3], e[4]) + up(e[3], e[4])
        np.testing.assert_allclose(tr.decoded[3].data, d4, atol=1e-12)
        np.testing.assert_allclose(calls[0][1], p5, atol=1e-12)
        d = d4
        for i in (3, 2, 1):
            p_prev = sigmoid(head(i + 1, d))
            np.testing.assert_allclose(calls[4 - i][1], p_prev, atol=1e-12)
            np.testing.assert_allclose(calls[4 - i][0], d, atol=1e-12)
            d = up(0.5 * d, e[i - 1]) * e[i - 1] + e[i - 1]
            np.testing.assert_allclose(tr.decoded[i - 1].data, d, atol=1e-12)
        np.testing.assert_allclose(tr.preds.native[0].data, sigmoid(head(1, d)), atol=1e-12)
        assert len(calls) == 4

    def test_upsampled_is_sigmoid_of_resized_logits(self, micro, image):
        preds = micro(Tensor(image))
        for lg, up in zip(preds.logits, preds.upsampled):
            np.testing.assert_allclose(up.data, sigmoid(bilinear_naive(lg.data, 64, 64)), atol=1e-12)

    def test_no_attention_is_plain_pyramid(self, image):
        base = ModelConfig.micro(heads=HeadGroupConfig(0, 0, 0))
        model = Model(base)
        plain = model.run(Tensor(image), msa_fn=lambda x, m, w: x)
        got = model.run(Tensor(image))
        for a, b in zip(plain.preds.upsampled, got.preds.upsampled):
            np.testing.assert_array_equal(a.data, b.data)

    def test_deterministic_init(self, image):
        a = Model(ModelConfig.micro(seed=3))(Tensor(image)).upsampled[0].data
        b = Model(ModelConfig.micro(seed=3))(Tensor(image)).upsampled[0].data
        c = Model(ModelConfig.micro(seed=4))(Tensor(image)).upsampled[0].data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_parameter_names_ordered(self, micro):
        names = list(micro.params)
        assert names[0] == "enc.stem.weight"
        assert names[-1] == "dec.head5.bias"
        assert "dec.msa1.ta.log_alpha" in names
