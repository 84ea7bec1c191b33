"""Central-difference verification of the analytic gradients.

Each registered target builds a scalar functional ``mean(out * r)`` of its
leaf tensors, where ``r`` is a fixed random map (a plain mean would make
e.g. softmax gradients identically zero).  Sampled coordinates of the
leaves are probed with ``(f(x + h) - f(x - h)) / 2h`` and compared to the
tape gradient with the relative error ``|a - n| / max(1, |a|, |n|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import HeadGroupConfig, init_branch, init_msa, masked_ta_forward, msa_forward, ta_forward
from .loss import bce_loss, iou_loss, total_loss
from .model import Model, ModelConfig
from .params import ParamStore
from .tensor import DIFFERENTIABLE_OPS, NonFiniteError, Tape, Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_SAMPLES = 64
INPUT_CLAMP = 4.0


class GradCheckError(ValueError):
    pass


@dataclass
class Probe:
    """What a target hands to the checker."""

    fn: Callable[[], Tensor]  # output tensor as a function of the leaves
    leaves: list
    pooled: bool = False  # sample ``samples`` coordinates over all leaves jointly


@dataclass
class GradCheckCase:
    target: str
    seed: int = 0
    samples: int = DEFAULT_SAMPLES
    h: float = DEFAULT_H
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if self.h <= 0:
            raise GradCheckError(f"step must be positive, got {self.h}")
        if self.tol <= 0:
            raise GradCheckError(f"tolerance must be positive, got {self.tol}")
        if self.samples < 1:
            raise GradCheckError(f"need at least one sample, got {self.samples}")


@dataclass
class CaseResult:
    case: GradCheckCase
    max_rel_err: float
    checked: int
    seconds: float
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_err < self.case.tol


REGISTRY: dict[str, Callable[[np.random.Generator], Probe]] = {}


def register(name: str):
    def deco(builder):
        if name in REGISTRY:
            raise GradCheckError(f"target {name!r} registered twice")
        REGISTRY[name] = builder
        return builder

    return deco


def _leaf(rng: np.random.Generator, shape, lo: float = -2.0, hi: float = 2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from(rng, shape, points, gap: float = 0.05, lo: float = -2.0, hi: float = 2.0) -> Tensor:
    """Random leaf with every entry at least ``gap`` from each kink in ``points``."""
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------------------
# op targets
# ---------------------------------------------------------------------------


@register("add")
def _(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (1, 3, 3))
    return Probe(lambda: T.add(a, b), [a, b])


@register("sub")
def _(rng):
    a, b = _leaf(rng, (1, 3, 3)), _leaf(rng, (2, 3, 3))
    return Probe(lambda: T.sub(a, b), [a, b])


@register("mul")
def _(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (1, 3, 3))
    return Probe(lambda: T.mul(a, b), [a, b])


@register("div")
def _(rng):
    a = _leaf(rng, (2, 3, 3))
    b = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 3)) * rng.choice([-1.0, 1.0], size=(2, 3, 3)), requires_grad=True)
    return Probe(lambda: T.div(a, b), [a, b])


@register("scale")
def _(rng):
    x, s = _leaf(rng, (2, 4)), _leaf(rng, (1,))
    return Probe(lambda: T.scale(x, s), [x, s])


@register("sigmoid")
def _(rng):
    x = _leaf(rng, (3, 4), -INPUT_CLAMP, INPUT_CLAMP)
    return Probe(lambda: T.sigmoid(x), [x])


@register("relu")
def _(rng):
    x = _away_from(rng, (3, 4), [0.0])
    return Probe(lambda: T.relu(x), [x])


@register("exp")
def _(rng):
    x = _leaf(rng, (3, 4))
    return Probe(lambda: T.exp(x), [x])


@register("log")
def _(rng):
    x = _leaf(rng, (3, 4), 0.2, 3.0)
    return Probe(lambda: T.log(x), [x])


@register("clamp")
def _(rng):
    x = _away_from(rng, (4, 5), [-0.5, 0.7])
    return Probe(lambda: T.clamp(x, -0.5, 0.7), [x])


@register("sum")
def _(rng):
    x = _leaf(rng, (2, 3, 2))
    return Probe(lambda: T.sum_(x), [x])


@register("mean")
def _(rng):
    x = _leaf(rng, (2, 3, 2))
    return Probe(lambda: T.mean(x), [x])


@register("reshape")
def _(rng):
    x = _leaf(rng, (2, 3, 4))
    return Probe(lambda: T.reshape(x, (6, 4)), [x])


@register("transpose")
def _(rng):
    x = _leaf(rng, (3, 5))
    return Probe(lambda: T.transpose(x), [x])


@register("concat")
def _(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (1, 3))
    return Probe(lambda: T.concat([a, b]), [a, b])


@register("slice")
def _(rng):
    x = _leaf(rng, (5, 3))
    return Probe(lambda: T.slice_(x, 1, 4), [x])


@register("matmul")
def _(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    return Probe(lambda: T.matmul(a, b), [a, b])


@register("softmax_lastdim")
def _(rng):
    x = _leaf(rng, (2, 4))
    return Probe(lambda: T.softmax_lastdim(x), [x])


@register("conv2d")
def _(rng):
    x, w, b = _leaf(rng, (3, 5, 5)), _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (2,))
    return Probe(lambda: T.conv2d(x, w, b), [x, w, b])


@register("conv2d_stride2")
def _(rng):
    x, w, b = _leaf(rng, (2, 6, 6)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    return Probe(lambda: T.conv2d(x, w, b, stride=2), [x, w, b])


@register("conv2d_pointwise")
def _(rng):
    x, w = _leaf(rng, (3, 4, 4)), _leaf(rng, (2, 3, 1, 1))
    return Probe(lambda: T.conv2d(x, w), [x, w])


@register("conv2d_depthwise")
def _(rng):
    x, w, b = _leaf(rng, (3, 5, 5)), _leaf(rng, (3, 1, 3, 3)), _leaf(rng, (3,))
    return Probe(lambda: T.conv2d(x, w, b, depthwise=True), [x, w, b])


@register("bilinear_resize")
def _(rng):
    x = _leaf(rng, (2, 3, 4))
    return Probe(lambda: T.bilinear_resize(x, 7, 5), [x])


# ---------------------------------------------------------------------------
# composite targets
# ---------------------------------------------------------------------------


def _branch(rng, cd: int, heads: int):
    store = ParamStore(seed=int(rng.integers(1 << 31)))
    w = init_branch(store, "b", cd, cd, heads)
    w.log_alpha.data[:] = rng.uniform(-0.5, 0.5, size=heads)
    return w, list(store.values())


@register("ta_forward")
def _(rng):
    x = _leaf(rng, (4, 4, 4), -1.0, 1.0)
    w, params = _branch(rng, 4, 2)
    return Probe(lambda: ta_forward(x, w), [x] + params)


@register("masked_ta_forward")
def _(rng):
    x = _leaf(rng, (4, 4, 4), -1.0, 1.0)
    m = Tensor(rng.uniform(0.05, 0.95, size=(1, 4, 4)), requires_grad=True)
    w, params = _branch(rng, 4, 2)
    return Probe(lambda: masked_ta_forward(x, m, w, mask_grad=True), [x, m] + params)


@register("msa_forward")
def _(rng):
    cfg = HeadGroupConfig(1, 1, 1)
    x = _leaf(rng, (6, 4, 4), -1.0, 1.0)
    m = Tensor(rng.uniform(0.05, 0.95, size=(1, 4, 4)), requires_grad=True)
    store = ParamStore(seed=int(rng.integers(1 << 31)))
    w = init_msa(store, "msa", 6, cfg)
    return Probe(lambda: msa_forward(x, m, w, cfg, mask_grad=True), [x, m] + list(store.values()))


@register("bce_loss")
def _(rng):
    p = _leaf(rng, (1, 4, 4), 0.05, 0.95)
    g = Tensor(rng.uniform(0.0, 1.0, size=(1, 4, 4)))
    return Probe(lambda: bce_loss(p, g), [p])


@register("iou_loss")
def _(rng):
    p = _leaf(rng, (1, 4, 4), 0.0, 1.0)
    g = Tensor((rng.uniform(size=(1, 4, 4)) > 0.5).astype(float))
    return Probe(lambda: iou_loss(p, g), [p])


def full_model_probe(rng, cfg: Optional[ModelConfig] = None) -> Probe:
    """Micro model plus the five-level loss; the side-output masks carry gradient
    so that the analytic and numeric derivatives see the same function."""
    cfg = cfg or ModelConfig.micro(
        input_size=(32, 32), stage_widths=(4, 4, 4, 4), seed=int(rng.integers(1 << 31)), mask_grad=True
    )
    model = Model(cfg)
    h, w = cfg.input_size
    img = Tensor(rng.uniform(0.0, 1.0, size=(3, h, w)))
    gt = (rng.uniform(size=(h, w)) > 0.5).astype(float)
    return Probe(lambda: total_loss(model(img).upsampled, gt).total, list(model.params.values()), pooled=True)


register("full-model")(full_model_probe)


def ablation_probe(rng, fta: int, bta: int, ta: int) -> Probe:
    cfg = ModelConfig.micro(
        input_size=(32, 32),
        stage_widths=(4, 4, 4, 4),
        seed=int(rng.integers(1 << 31)),
        mask_grad=True,
        heads=HeadGroupConfig(fta, bta, ta),
    )
    return full_model_probe(rng, cfg)


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------


def _sample(rng, sizes: Sequence[int], samples: int, pooled: bool) -> list[tuple[int, int]]:
    """(leaf index, flat index) pairs, in increasing order."""
    out = []
    if pooled:
        total = sum(sizes)
        picks = np.sort(rng.choice(total, size=min(samples, total), replace=False))
        bounds = np.cumsum([0] + list(sizes))
        for p in picks:
            leaf = int(np.searchsorted(bounds, p, side="right") - 1)
            out.append((leaf, int(p - bounds[leaf])))
        return out
    for i, n in enumerate(sizes):
        picks = np.sort(rng.choice(n, size=min(samples, n), replace=False))
        out.extend((i, int(p)) for p in picks)
    return out


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def check_probe(probe: Probe, case: GradCheckCase, rng: np.random.Generator) -> tuple[float, int]:
    with Tape():
        out0 = probe.fn()
    r = Tensor(rng.uniform(-1.0, 1.0, size=out0.shape))

    def functional() -> Tensor:
        out = probe.fn()
        return T.mean(T.mul(out, r)) if out.shape else out

    for leaf in probe.leaves:
        leaf.grad = None
    with Tape() as tape:
        f = functional()
    tape.backward(f)

    coords = _sample(rng, [leaf.size for leaf in probe.leaves], case.samples, probe.pooled)
    worst = 0.0
    for li, idx in coords:
        leaf = probe.leaves[li]
        flat = leaf.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + case.h
        fp = functional().item()
        flat[idx] = orig - case.h
        fm = functional().item()
        flat[idx] = orig
        numeric = (fp - fm) / (2.0 * case.h)
        analytic = 0.0 if leaf.grad is None else float(leaf.grad.reshape(-1)[idx])
        worst = max(worst, rel_err(analytic, numeric))
    return worst, len(coords)


def check_op(case: GradCheckCase, builder: Optional[Callable] = None) -> CaseResult:
    if builder is None:
        if case.target not in REGISTRY:
            raise GradCheckError(f"unregistered gradcheck target {case.target!r}")
        builder = REGISTRY[case.target]
    rng = np.random.default_rng(case.seed)
    start = time.perf_counter()
    try:
        worst, n = check_probe(builder(rng), case, rng)
        error = None
    except NonFiniteError as exc:
        worst, n, error = float("inf"), 0, f"non-finite value: {exc}"
    return CaseResult(case, worst, n, time.perf_counter() - start, error)


def op_coverage() -> dict[str, list[str]]:
    """Registered targets exercising each differentiable op (by name prefix)."""
    return {op: [t for t in REGISTRY if t == op or t.startswith(op + "_")] for op in DIFFERENTIABLE_OPS}


def check_coverage() -> None:
    missing = [op for op, targets in op_coverage().items() if not targets]
    if missing:
        raise GradCheckError(f"differentiable ops without a gradcheck case: {', '.join(missing)}")


def default_suite() -> list[GradCheckCase]:
    check_coverage()
    return [GradCheckCase(t) for t in REGISTRY]


_CASE_KEYS = {"seed": int, "samples": int, "h": float, "tol": float}


def parse_suite(text: str) -> list[GradCheckCase]:
    """One case per line: ``target [key=value ...]``; ``#`` starts a comment."""
    cases = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        target, *opts = line.split()
        if target not in REGISTRY:
            raise GradCheckError(f"line {lineno}: unregistered gradcheck target {target!r}")
        kwargs = {}
        for opt in opts:
            key, sep, value = opt.partition("=")
            if not sep or key not in _CASE_KEYS:
                raise GradCheckError(f"line {lineno}: bad option {opt!r}")
            try:
                kwargs[key] = _CASE_KEYS[key](value)
            except ValueError:
                raise GradCheckError(f"line {lineno}: bad value for {key}: {value!r}") from None
        cases.append(GradCheckCase(target, **kwargs))
    return cases


def load_suite(path) -> list[GradCheckCase]:
    return parse_suite(Path(path).read_text())


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        lines = [f"{'target':<22} {'checked':>7} {'max_rel_err':>12} {'seconds':>8}  status"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            if r.error:
                status += f" ({r.error})"
            lines.append(f"{r.case.target:<22} {r.checked:>7d} {r.max_rel_err:>12.3e} {r.seconds:>8.2f}  {status}")
        n_ok = sum(r.passed for r in self.results)
        lines.append(f"{n_ok}/{len(self.results)} cases passed")
        return "\n".join(lines)


def check_suite(cases: Optional[Sequence[GradCheckCase]] = None) -> SuiteReport:
    cases = default_suite() if cases is None else list(cases)
    return SuiteReport([check_op(c) for c in cases])
