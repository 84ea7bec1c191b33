"""Encoder stub, top aggregation and the progressive refinement decoder.

Level bookkeeping (index 0 is the finest level)::

    E1  stride 4     D1 = up(MSA(D2; P2)) * E1 + E1    -> P1
    E2  stride 8     D2 = up(MSA(D3; P3)) * E2 + E2    -> P2
    E3  stride 16    D3 = up(MSA(D4; P4)) * E3 + E3    -> P3
    E4  stride 32    D4 = MSA(E5; P5) * up(E4) + up(E4) -> P4
    E5  stride 32    aggregate(E2, E3, E4)             -> P5
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from . import tensor as T
from .attention import HeadGroupConfig, MsaWeights, init_msa, msa_forward
from .params import ConvParams, ParamStore
from .tensor import Tensor

STRIDES = (4, 8, 16, 32, 32)
CD_GRID = (32, 64, 128, 192, 256)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (384, 384)
    stage_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    cd: int = 128
    heads: HeadGroupConfig = field(default_factory=lambda: HeadGroupConfig.split(8))
    seed: int = 0
    mask_grad: bool = False
    init: str = "uniform"

    def __post_init__(self):
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input size {h}x{w} must be positive multiples of 32")
        if len(self.stage_widths) != 4 or min(self.stage_widths) < 1:
            raise ConfigError(f"need four positive stage widths, got {self.stage_widths}")
        if self.cd < 1:
            raise ConfigError(f"decoder width must be positive, got {self.cd}")
        if self.heads.total and self.cd % self.heads.total:
            raise ConfigError(f"{self.heads.total} heads do not divide cd={self.cd}")
        if self.init not in ("uniform", "zero"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.cd not in CD_GRID:
            warnings.warn(f"decoder width {self.cd} is outside the usual grid {CD_GRID}", stacklevel=3)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration used by the gradient checks and the overfit demo."""
        base = dict(
            input_size=(64, 64),
            stage_widths=(8, 8, 8, 8),
            cd=6,
            heads=HeadGroupConfig(1, 1, 1),
            seed=7,
        )
        base.update(overrides)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return cls(**base)

    def with_heads(self, fta: int, bta: int, ta: int) -> "ModelConfig":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return replace(self, heads=HeadGroupConfig(fta, bta, ta))


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str) -> ModelConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        kv[key] = value

    args: dict = {}
    heads = {}
    try:
        for key, value in kv.items():
            if key == "input_size":
                parts = value.lower().replace("x", ",").split(",")
                dims = [int(p) for p in parts if p.strip()]
                args["input_size"] = (dims[0], dims[-1])
            elif key == "cd":
                args["cd"] = int(value)
            elif key == "stage_widths":
                args["stage_widths"] = tuple(int(p) for p in value.split(","))
            elif key in ("heads_fta", "heads_bta", "heads_ta"):
                heads[key] = int(value)
            elif key == "seed":
                args["seed"] = int(value)
            elif key == "mask_grad":
                args["mask_grad"] = _BOOL[value.lower()]
            elif key == "init":
                args["init"] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except (ValueError, KeyError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None
    if heads:
        args["heads"] = HeadGroupConfig(
            heads.get("heads_fta", 0), heads.get("heads_bta", 0), heads.get("heads_ta", 0)
        )
    return ModelConfig(**args)


def load_config(path) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: ModelConfig) -> str:
    h, w = cfg.input_size
    lines = [
        f"input_size={h}x{w}",
        f"cd={cfg.cd}",
        "stage_widths=" + ",".join(str(v) for v in cfg.stage_widths),
        f"heads_fta={cfg.heads.heads_fta}",
        f"heads_bta={cfg.heads.heads_bta}",
        f"heads_ta={cfg.heads.heads_ta}",
        f"seed={cfg.seed}",
        f"mask_grad={'true' if cfg.mask_grad else 'false'}",
        f"init={cfg.init}",
    ]
    return "\n".join(lines) + "\n"


@dataclass
class FeaturePyramid:
    levels: list  # E1..E5, each cd x h x w
    strides: tuple = STRIDES

    def __getitem__(self, i: int) -> Tensor:
        """1-based level access: ``pyr[1]`` is E1."""
        return self.levels[i - 1]


@dataclass
class PredictionSet:
    logits: list  # native-resolution pre-sigmoid maps, P1..P5
    native: list  # sigmoid(logits)
    upsampled: list  # sigmoid(bilinear(logits)) at input resolution

    def __getitem__(self, i: int) -> Tensor:
        return self.native[i - 1]


@dataclass
class EncoderWeights:
    stem: ConvParams
    stages: list  # four ConvParams, stride 2 each


@dataclass
class DecoderWeights:
    reduce: list  # 1x1 convs to cd for E1..E4
    aggregate: ConvParams
    msa: list  # MsaWeights for D4, D3, D2, D1 (index 0 -> level 4)
    heads: list  # prediction heads for P1..P5


def check_input_size(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ConfigError(f"input size {h}x{w} is not divisible by 32")


def encoder_forward(img: Tensor, weights: EncoderWeights) -> list:
    """Raw features at strides 4, 8, 16, 32 from an image with values in [0, 1]."""
    if img.ndim != 3:
        raise ConfigError(f"expected a C x H x W image, got shape {img.shape}")
    check_input_size(img.shape[1], img.shape[2])
    centred = T.sub(T.scale(img, 2.0), 1.0)  # [0, 1] -> [-1, 1]
    x = T.relu(weights.stem(centred))
    feats = []
    for conv in weights.stages:
        x = T.relu(conv(x))
        feats.append(x)
    return feats


def aggregate_top(e2: Tensor, e3: Tensor, e4: Tensor, conv: ConvParams) -> Tensor:
    """Resize E2 and E3 onto E4's grid, concatenate, then conv + ReLU back to cd."""
    cd = e4.shape[0]
    if e2.shape[0] != cd or e3.shape[0] != cd:
        raise ConfigError(f"channel mismatch in aggregation: {e2.shape}, {e3.shape}, {e4.shape}")
    h, w = e4.shape[1:]
    stacked = T.concat([T.bilinear_resize(e2, h, w), T.bilinear_resize(e3, h, w), e4])
    return T.relu(conv(stacked))


def predict_logits(feat: Tensor, head: ConvParams) -> Tensor:
    return head(feat)


def predict_mask(feat: Tensor, head: ConvParams) -> Tensor:
    """3x3 conv to one channel followed by a sigmoid."""
    return T.sigmoid(head(feat))


def build_pyramid(raw: list, weights: DecoderWeights) -> FeaturePyramid:
    reduced = [conv(f) for conv, f in zip(weights.reduce, raw)]
    e5 = aggregate_top(reduced[1], reduced[2], reduced[3], weights.aggregate)
    return FeaturePyramid(reduced + [e5])


MsaFn = Callable[[Tensor, Tensor, MsaWeights], Tensor]


def decoder_forward(
    pyr: FeaturePyramid,
    weights: DecoderWeights,
    input_size: tuple[int, int],
    mask_grad: bool = False,
    msa_fn: Optional[MsaFn] = None,
):
    """Progressive refinement; returns ``(PredictionSet, [D1, D2, D3, D4])``."""
    if msa_fn is None:

        def msa_fn(x, m, w):
            return msa_forward(x, m, w, mask_grad=mask_grad)

    e1, e2, e3, e4, e5 = pyr.levels
    logits5 = predict_logits(e5, weights.heads[4])
    p5 = T.sigmoid(logits5)

    up_e4 = T.bilinear_resize(e4, *e5.shape[1:])
    d4 = T.add(T.mul(msa_fn(e5, p5, weights.msa[0]), up_e4), up_e4)
    logits = {5: logits5, 4: predict_logits(d4, weights.heads[3])}
    probs = {5: p5, 4: T.sigmoid(logits[4])}
    ds = {4: d4}

    for i, e in ((3, e3), (2, e2), (1, e1)):
        refined = msa_fn(ds[i + 1], probs[i + 1], weights.msa[4 - i])
        up = T.bilinear_resize(refined, *e.shape[1:])
        ds[i] = T.add(T.mul(up, e), e)
        logits[i] = predict_logits(ds[i], weights.heads[i - 1])
        probs[i] = T.sigmoid(logits[i])

    h, w = input_size
    order = (1, 2, 3, 4, 5)
    preds = PredictionSet(
        logits=[logits[i] for i in order],
        native=[probs[i] for i in order],
        upsampled=[T.sigmoid(T.bilinear_resize(logits[i], h, w)) for i in order],
    )
    return preds, [ds[i] for i in (1, 2, 3, 4)]


@dataclass
class ForwardTrace:
    raw: list
    pyramid: FeaturePyramid
    decoded: list
    preds: PredictionSet


class Model:
    """Parameters plus the forward composition for one configuration."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        store = ParamStore(seed=cfg.seed, init=cfg.init)
        w1, w2, w3, w4 = cfg.stage_widths
        self.encoder = EncoderWeights(
            stem=store.conv("enc.stem", w1, 3, 3, stride=2),
            stages=[
                store.conv("enc.stage1", w1, w1, 3, stride=2),
                store.conv("enc.stage2", w2, w1, 3, stride=2),
                store.conv("enc.stage3", w3, w2, 3, stride=2),
                store.conv("enc.stage4", w4, w3, 3, stride=2),
            ],
        )
        cd = cfg.cd
        reduce = [store.conv(f"dec.reduce{i + 1}", cd, w, 1) for i, w in enumerate(cfg.stage_widths)]
        aggregate = store.conv("dec.aggregate", cd, 3 * cd, 3)
        msa = [init_msa(store, f"dec.msa{lvl}", cd, cfg.heads) for lvl in (4, 3, 2, 1)]
        heads = [store.conv(f"dec.head{i}", 1, cd, 3) for i in (1, 2, 3, 4, 5)]
        self.decoder = DecoderWeights(reduce, aggregate, msa, heads)
        self.params = store

    def run(self, img: Tensor, msa_fn: Optional[MsaFn] = None) -> ForwardTrace:
        raw = encoder_forward(img, self.encoder)
        pyr = build_pyramid(raw, self.decoder)
        preds, ds = decoder_forward(
            pyr, self.decoder, img.shape[1:], mask_grad=self.cfg.mask_grad, msa_fn=msa_fn
        )
        return ForwardTrace(raw, pyr, ds, preds)

    def forward(self, img: Tensor) -> PredictionSet:
        return self.run(img).preds

    __call__ = forward
