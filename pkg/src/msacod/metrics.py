"""Foreground-map evaluation: MAE, S-measure, weighted F, adaptive E, PR/F-beta
curves and border-band variants.

Predictions are float maps in [0, 1]; ground truth is binarised at 0.5.
All functions accept plain 2-D arrays or :class:`GrayMap` instances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

GT_THRESHOLD = 0.5
S_ALPHA = 0.5
WF_BETA2 = 1.0
WF_GAUSS_SIZE = 7
WF_GAUSS_SIGMA = 5.0
WF_DECAY_BASE = 0.5
WF_DECAY_SCALE = 5.0
CURVE_BETA2 = 0.3
N_THRESHOLDS = 256
_EPS = np.spacing(1.0)

METRIC_NAMES = ("sm", "wf", "em", "mae")


class MetricError(ValueError):
    pass


@dataclass
class GrayMap:
    """A 2-D map with values in [0, 1] (8-bit pixel / 255)."""

    values: np.ndarray
    path: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise MetricError(f"gray map must be 2-D, got shape {v.shape}")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binarized(self) -> np.ndarray:
        return self.values >= GT_THRESHOLD

    @property
    def non_binary_pixels(self) -> int:
        """Pixels that are neither exactly 0 nor exactly 1."""
        v = self.values
        return int(np.count_nonzero((v != 0.0) & (v != 1.0)))


def _values(m) -> np.ndarray:
    if isinstance(m, GrayMap):
        return m.values
    return np.asarray(m, dtype=np.float64)


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = _values(pred)
    g = _values(gt)
    if p.shape != g.shape:
        raise MetricError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    if p.ndim != 2:
        raise MetricError(f"maps must be 2-D, got shape {p.shape}")
    return p, g >= GT_THRESHOLD


def _region_mask(region, shape) -> np.ndarray:
    if region is None:
        return np.ones(shape, dtype=bool)
    r = np.asarray(region).astype(bool)
    if r.shape != shape:
        raise MetricError(f"region {r.shape} does not match map {shape}")
    return r


# ---------------------------------------------------------------------------
# MAE
# ---------------------------------------------------------------------------


def mae(pred, gt, region=None) -> float:
    p, g = _prepare(pred, gt)
    sel = _region_mask(region, p.shape)
    if not sel.any():
        raise MetricError("empty evaluation region")
    return float(np.abs(p[sel] - g[sel]).mean())


# ---------------------------------------------------------------------------
# S-measure
# ---------------------------------------------------------------------------


def _ratio(num: float, den: float, both_zero: float = 0.0) -> float:
    if den == 0:
        return both_zero if num == 0 else 0.0
    return num / den


def _object_score(vals: np.ndarray) -> float:
    x = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return _ratio(2.0 * x, x * x + 1.0 + sigma)


def _object(p: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = _object_score(p[g])
    bg = _object_score(1.0 - p[~g])
    return u * fg + (1.0 - u) * bg


def _centroid(g: np.ndarray) -> tuple[int, int]:
    h, w = g.shape
    area = g.sum()
    if area == 0:
        x, y = np.round(w / 2), np.round(h / 2)
    else:
        x = np.round((g.sum(axis=0) * np.arange(w)).sum() / area)
        y = np.round((g.sum(axis=1) * np.arange(h)).sum() / area)
    return int(x) + 1, int(y) + 1


def _block_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return _ratio(a, b)
    return 1.0 if b == 0 else 0.0


def _region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    gf = g.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1.0 - w1 - w2 - w3
    blocks = (
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    )
    score = 0.0
    for wt, (rs, cs) in zip((w1, w2, w3, w4), blocks):
        if wt:
            score += wt * _block_ssim(p[rs, cs], gf[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = S_ALPHA) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term.

    An all-background GT scores ``1 - mean(pred)``; an all-foreground GT
    scores ``mean(pred)``.
    """
    p, g = _prepare(pred, gt)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    s = alpha * _object(p, g) + (1.0 - alpha) * _region(p, g)
    return float(max(0.0, s))


# ---------------------------------------------------------------------------
# weighted F-measure
# ---------------------------------------------------------------------------


def matlab_gaussian(size: int = WF_GAUSS_SIZE, sigma: float = WF_GAUSS_SIGMA) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def _neighbour_offsets(radius_sq: int) -> list[tuple[int, int]]:
    r = int(np.ceil(np.sqrt(radius_sq)))
    offs = [
        (dy * dy + dx * dx, dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if 0 < dy * dy + dx * dx <= radius_sq
    ]
    return [(dy, dx) for _, dy, dx in sorted(offs)]


# A background pixel inside the Gaussian window of some foreground pixel has
# its nearest foreground pixel within Chebyshev radius r, hence within
# Euclidean radius sqrt(2) * r.
_WF_RADIUS = WF_GAUSS_SIZE // 2
_WF_OFFSETS = _neighbour_offsets(2 * _WF_RADIUS * _WF_RADIUS)


def _shift(a: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """``out[y, x] = a[y + dy, x + dx]`` with ``fill`` outside the map."""
    h, w = a.shape
    out = np.full_like(a, fill)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = a[ys, xs]
    return out


def _propagate_fg_error(err: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Copy to each background pixel the error of its nearest foreground pixel.

    Ties go to the smallest (row, column) offset.  Only background pixels
    that can reach a foreground pixel through the Gaussian window are
    filled; the rest keep their own error (they never influence the result).
    """
    out = err.copy()
    done = g.copy()
    for dy, dx in _WF_OFFSETS:
        src_fg = _shift(g, dy, dx, False)
        take = src_fg & ~done
        if take.any():
            out[take] = _shift(err, dy, dx, 0.0)[take]
            done |= take
    return out


def weighted_error_map(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-pixel weighted error used by the weighted F-measure."""
    err = np.abs(p - g)
    spread = _propagate_fg_error(err, g)
    blurred = ndimage.correlate(spread, matlab_gaussian(), mode="constant", cval=0.0)
    min_err = np.where(g & (blurred < err), blurred, err)
    dist = ndimage.distance_transform_edt(~g)
    importance = np.where(g, 1.0, 2.0 - np.exp(np.log(WF_DECAY_BASE) / WF_DECAY_SCALE * dist))
    return min_err * importance


def weighted_fmeasure(pred, gt, region=None, beta2: float = WF_BETA2) -> float:
    """Weighted F-measure; ``region`` restricts every sum to a pixel subset.

    With no foreground in the evaluated pixels the score is 1.0 when the
    prediction is identically zero there and 0.0 otherwise.
    """
    p, g = _prepare(pred, gt)
    sel = _region_mask(region, p.shape)
    fg = g & sel
    bg = ~g & sel
    if not fg.any():
        return 1.0 if not np.any(p[sel]) else 0.0
    ew = weighted_error_map(p, g)
    n_fg = np.count_nonzero(fg)
    tp = n_fg - ew[fg].sum()
    fp = ew[bg].sum()
    recall = 1.0 - ew[fg].mean()
    precision = tp / (tp + fp + _EPS)
    q = (1.0 + beta2) * recall * precision / (recall + beta2 * precision + _EPS)
    return float(q)


# ---------------------------------------------------------------------------
# adaptive E-measure
# ---------------------------------------------------------------------------


def adaptive_threshold(p: np.ndarray) -> float:
    return float(min(2.0 * p.mean(), 1.0))


def adaptive_emeasure(pred, gt) -> float:
    """Enhanced-alignment score of the prediction binarised at twice its mean.

    The binarisation is ``pred >= t``; an identically-zero prediction (t = 0)
    binarises to all background.  All-background / all-foreground GT score
    the fraction of pixels predicted background / foreground.
    """
    p, g = _prepare(pred, gt)
    t = adaptive_threshold(p)
    fgp = (p >= t) if t > 0 else np.zeros(p.shape, dtype=bool)
    gm = g.mean()
    if gm == 0:
        enhanced = (~fgp).astype(np.float64)
    elif gm == 1:
        enhanced = fgp.astype(np.float64)
    else:
        bp = fgp - fgp.mean()
        bg = g - gm
        num = 2.0 * bp * bg
        den = bp * bp + bg * bg
        align = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


@dataclass
class Curves:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fbeta: np.ndarray


def curve_thresholds() -> np.ndarray:
    return np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1)


def confusion_counts(pred, gt) -> tuple[np.ndarray, np.ndarray, int]:
    """True/false positive counts of ``pred > t`` at each curve threshold."""
    p, g = _prepare(pred, gt)
    t = curve_thresholds()
    fg = np.sort(p[g])
    bg = np.sort(p[~g])
    tp = fg.size - np.searchsorted(fg, t, side="right")
    fp = bg.size - np.searchsorted(bg, t, side="right")
    return tp, fp, int(fg.size)


def pr_and_fbeta_curves(pred, gt, beta2: float = CURVE_BETA2) -> Curves:
    """Precision, recall and F-beta of ``pred > t`` for t = 0/255 .. 255/255.

    An empty binarised prediction has precision 1.
    """
    tp, fp, n_fg = confusion_counts(pred, gt)
    pos = tp + fp
    precision = np.where(pos > 0, tp / np.maximum(pos, 1), 1.0)
    recall = tp / max(n_fg, 1)
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    fbeta = np.divide(num, den, out=np.zeros_like(num), where=num > 0)
    return Curves(curve_thresholds(), precision, recall, fbeta)


# ---------------------------------------------------------------------------
# morphology and border bands
# ---------------------------------------------------------------------------

_SQUARE3 = np.ones((3, 3), dtype=bool)


def erode(mask: np.ndarray, k: int = 3) -> np.ndarray:
    """Binary erosion by a k x k square; outside the image counts as background."""
    return ndimage.minimum_filter(np.asarray(mask, dtype=np.uint8), size=k, mode="constant", cval=0).astype(bool)


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary dilation by a k x k square.

    ``out[y, x]`` is set when any input pixel lies in rows
    ``y - k//2 .. y - k//2 + k - 1`` (same for columns); for odd ``k`` this
    is the centred window.
    """
    if k < 1:
        raise MetricError(f"kernel size must be positive, got {k}")
    return ndimage.maximum_filter(np.asarray(mask, dtype=np.uint8), size=k, mode="constant", cval=0).astype(bool)


def object_boundary(gt) -> np.ndarray:
    g = _values(gt) >= GT_THRESHOLD
    return g & ~erode(g, 3)


def border_region(gt, k: int) -> np.ndarray:
    """Band of width ~k around the GT object boundary, as a boolean map."""
    return dilate(object_boundary(gt), k)


@dataclass
class BorderScores:
    wf: float
    mae: float
    empty: bool = False


def br_metrics(pred, gt, k: int) -> BorderScores:
    """Weighted F and MAE restricted to ``border_region(gt, k)``."""
    p, g = _prepare(pred, gt)
    region = border_region(g, k)
    if not region.any():
        log.info("border region at k=%d is empty; scoring (1.0, 0.0)", k)
        return BorderScores(1.0, 0.0, empty=True)
    return BorderScores(weighted_fmeasure(p, g, region=region), mae(p, g, region=region))


# ---------------------------------------------------------------------------
# per-image evaluation and aggregation
# ---------------------------------------------------------------------------


@dataclass
class ImageReport:
    name: str
    scores: dict
    curves: Optional[Curves] = None
    flags: list = field(default_factory=list)


def evaluate_pair(
    pred,
    gt,
    name: str = "",
    metrics: Iterable[str] = METRIC_NAMES,
    border_kernels: Sequence[int] = (),
    curves: bool = True,
) -> ImageReport:
    p, g = _prepare(pred, gt)
    metrics = list(metrics)
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise MetricError(f"unknown metrics {sorted(unknown)}")
    funcs = {"sm": s_measure, "wf": weighted_fmeasure, "em": adaptive_emeasure, "mae": mae}
    scores = {}
    for m in METRIC_NAMES:
        if m in metrics:
            scores[m] = funcs[m](p, g)
    flags = []
    for k in border_kernels:
        br = br_metrics(p, g, k)
        scores[f"br{k}_wf"] = br.wf
        scores[f"br{k}_mae"] = br.mae
        if br.empty:
            flags.append(f"br{k}_empty")
    return ImageReport(name, scores, pr_and_fbeta_curves(p, g) if curves else None, flags)


@dataclass
class MetricReport:
    images: list
    means: dict
    count: int
    curves: Optional[Curves] = None


def aggregate(reports: Sequence[ImageReport]) -> MetricReport:
    """Arithmetic mean of every score (summed in list order)."""
    reports = list(reports)
    if not reports:
        raise MetricError("cannot aggregate an empty report list")
    keys = list(reports[0].scores)
    means = {}
    for k in keys:
        total = 0.0
        for r in reports:
            total += r.scores[k]
        means[k] = total / len(reports)
    curves = None
    if all(r.curves is not None for r in reports):
        acc = {f: np.zeros(N_THRESHOLDS) for f in ("precision", "recall", "fbeta")}
        for r in reports:
            for f in acc:
                acc[f] = acc[f] + getattr(r.curves, f)
        curves = Curves(curve_thresholds(), *(acc[f] / len(reports) for f in ("precision", "recall", "fbeta")))
    return MetricReport(reports, means, len(reports), curves)
