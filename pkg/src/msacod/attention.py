"""Transposed (channel) attention and its foreground/background-masked variants.

Each branch projects its input to query/key/value maps with a 1x1 conv
followed by a 3x3 depthwise conv.  Per head, with ``Q, K, V`` flattened to
``C_h x HW`` (channel-first, i.e. the transpose of the ``HW x C_h`` layout)::

    A   = softmax_lastdim(Q K^T / alpha)        # C_h x C_h, equals Q'^T K'
    out = A^T V                                 # equals V' A in HW x C_h

The masked branches multiply ``Q`` and ``K`` (never ``V``) by a continuous
mask before forming ``A``.  A masked-separable block runs the foreground,
background and plain branches side by side, concatenates them along
channels and mixes with a 3x3 conv.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .params import ConvParams, ParamStore
from .tensor import Tensor


class AttentionError(ValueError):
    pass


MASK_TOL = 1e-6


@dataclass(frozen=True)
class HeadGroupConfig:
    """Head counts for the foreground, background and plain groups."""

    heads_fta: int = 1
    heads_bta: int = 1
    heads_ta: int = 1

    def __post_init__(self):
        if min(self.heads_fta, self.heads_bta, self.heads_ta) < 0:
            raise AttentionError(f"negative head count in {self}")

    @property
    def total(self) -> int:
        return self.heads_fta + self.heads_bta + self.heads_ta

    @classmethod
    def split(cls, total: int) -> "HeadGroupConfig":
        """Equal thirds; any remainder goes to the plain group."""
        third = total // 3
        return cls(third, third, total - 2 * third)

    def channels_per_head(self, cd: int) -> int:
        if self.total == 0:
            raise AttentionError("no attention heads configured")
        if cd % self.total:
            raise AttentionError(f"{self.total} heads do not divide {cd} channels")
        return cd // self.total

    def groups(self) -> list[tuple[str, int]]:
        return [("fta", self.heads_fta), ("bta", self.heads_bta), ("ta", self.heads_ta)]


@dataclass
class BranchWeights:
    q_pw: ConvParams
    q_dw: ConvParams
    k_pw: ConvParams
    k_dw: ConvParams
    v_pw: ConvParams
    v_dw: ConvParams
    log_alpha: Tensor  # one entry per head; alpha = exp(log_alpha) > 0

    @property
    def heads(self) -> int:
        return self.log_alpha.shape[0]

    @property
    def out_channels(self) -> int:
        return self.q_pw.out_channels


@dataclass
class MsaWeights:
    fta: Optional[BranchWeights]
    bta: Optional[BranchWeights]
    ta: Optional[BranchWeights]
    out: Optional[ConvParams]


def init_branch(store: ParamStore, prefix: str, c_in: int, c_out: int, heads: int) -> BranchWeights:
    convs = {}
    for role in ("q", "k", "v"):
        convs[f"{role}_pw"] = store.conv(f"{prefix}.{role}.pw", c_out, c_in, 1)
        convs[f"{role}_dw"] = store.conv(f"{prefix}.{role}.dw", c_out, c_out, 3, depthwise=True)
    log_alpha = store.add(f"{prefix}.log_alpha", np.zeros(heads))
    return BranchWeights(log_alpha=log_alpha, **convs)


def init_msa(store: ParamStore, prefix: str, cd: int, cfg: HeadGroupConfig) -> MsaWeights:
    if cfg.total == 0:
        return MsaWeights(None, None, None, None)
    ch = cfg.channels_per_head(cd)
    branches = {}
    for name, n in cfg.groups():
        branches[name] = init_branch(store, f"{prefix}.{name}", cd, n * ch, n) if n else None
    out = store.conv(f"{prefix}.out", cd, cd, 3)
    return MsaWeights(out=out, **branches)


def _project(x: Tensor, pw: ConvParams, dw: ConvParams) -> Tensor:
    return dw(pw(x))


def _attend(q: Tensor, k: Tensor, v: Tensor, log_alpha: Tensor) -> Tensor:
    heads = log_alpha.shape[0]
    c, h, w = q.shape
    if heads < 1 or c % heads:
        raise AttentionError(f"{heads} heads do not divide {c} channels")
    ch = c // heads
    n = h * w
    qf, kf, vf = (T.reshape(t, (c, n)) for t in (q, k, v))
    outs = []
    for i in range(heads):
        lo, hi = i * ch, (i + 1) * ch
        qh, kh, vh = T.slice_(qf, lo, hi), T.slice_(kf, lo, hi), T.slice_(vf, lo, hi)
        inv_alpha = T.exp(T.scale(T.slice_(log_alpha, i, i + 1), -1.0))
        logits = T.scale(T.matmul(qh, T.transpose(kh)), inv_alpha)
        attn = T.softmax_lastdim(logits)
        outs.append(T.matmul(T.transpose(attn), vh))
    out = outs[0] if heads == 1 else T.concat(outs)
    return T.reshape(out, (c, h, w))


def ta_forward(x: Tensor, weights: BranchWeights, heads: Optional[int] = None) -> Tensor:
    """Multi-head transposed attention over channels."""
    heads = weights.heads if heads is None else heads
    if heads != weights.heads:
        raise AttentionError(f"weights carry {weights.heads} scales, {heads} heads requested")
    if weights.out_channels % heads:
        raise AttentionError(f"{heads} heads do not divide {weights.out_channels} channels")
    q = _project(x, weights.q_pw, weights.q_dw)
    k = _project(x, weights.k_pw, weights.k_dw)
    v = _project(x, weights.v_pw, weights.v_dw)
    return _attend(q, k, v, weights.log_alpha)


def check_mask(mask: Tensor, x: Tensor) -> None:
    if mask.shape != (1,) + x.shape[1:]:
        raise AttentionError(f"mask shape {mask.shape} does not match input {x.shape}")
    lo, hi = mask.data.min(), mask.data.max()
    if lo < -MASK_TOL or hi > 1 + MASK_TOL:
        raise AttentionError(f"mask values must lie in [0, 1], got range [{lo}, {hi}]")


def masked_ta_forward(
    x: Tensor,
    mask: Tensor,
    weights: BranchWeights,
    heads: Optional[int] = None,
    mask_grad: bool = False,
) -> Tensor:
    """Transposed attention with query and key gated by ``mask`` (1 x H x W).

    The mask is treated as a constant unless ``mask_grad`` is set.
    """
    check_mask(mask, x)
    heads = weights.heads if heads is None else heads
    if heads != weights.heads:
        raise AttentionError(f"weights carry {weights.heads} scales, {heads} heads requested")
    if not mask_grad:
        mask = mask.detach()
    q = T.mul(_project(x, weights.q_pw, weights.q_dw), mask)
    k = T.mul(_project(x, weights.k_pw, weights.k_dw), mask)
    v = _project(x, weights.v_pw, weights.v_dw)
    return _attend(q, k, v, weights.log_alpha)


def msa_branches(
    x: Tensor,
    fg_mask: Tensor,
    weights: MsaWeights,
    mask_grad: bool = False,
) -> list[Tensor]:
    """Outputs of the present branches, in foreground/background/plain order."""
    check_mask(fg_mask, x)
    outs = []
    if weights.fta is not None:
        outs.append(masked_ta_forward(x, fg_mask, weights.fta, mask_grad=mask_grad))
    if weights.bta is not None:
        m = fg_mask if mask_grad else fg_mask.detach()
        bg_mask = T.sub(1.0, m)
        outs.append(masked_ta_forward(x, bg_mask, weights.bta, mask_grad=mask_grad))
    if weights.ta is not None:
        outs.append(ta_forward(x, weights.ta))
    return outs


def msa_forward(
    x: Tensor,
    fg_mask: Tensor,
    weights: MsaWeights,
    cfg: Optional[HeadGroupConfig] = None,
    mask_grad: bool = False,
) -> Tensor:
    """Masked separable attention block; identity when no heads are configured."""
    if cfg is not None:
        present = [(w is not None) for w in (weights.fta, weights.bta, weights.ta)]
        wanted = [n > 0 for _, n in cfg.groups()]
        if present != wanted:
            raise AttentionError(f"weights do not match head configuration {cfg}")
    outs = msa_branches(x, fg_mask, weights, mask_grad=mask_grad)
    if not outs:
        return x
    z = outs[0] if len(outs) == 1 else T.concat(outs)
    if z.shape[0] != x.shape[0]:
        raise AttentionError(f"branches produce {z.shape[0]} channels, expected {x.shape[0]}")
    return weights.out(z)
