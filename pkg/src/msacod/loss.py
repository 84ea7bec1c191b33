"""BCE + soft-IoU side supervision summed over the five prediction levels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, TensorError

EPS = 1e-7
IOU_SMOOTH = 1.0


def _check_shapes(pred: Tensor, gt: Tensor, name: str) -> None:
    if pred.shape != gt.shape:
        raise TensorError(f"{name}: prediction {pred.shape} and target {gt.shape} differ")


def bce_loss(pred: Tensor, gt: Tensor, eps: float = EPS) -> Tensor:
    """Mean binary cross-entropy with the prediction clamped to [eps, 1 - eps]."""
    _check_shapes(pred, gt, "bce_loss")
    p = T.clamp(pred, eps, 1.0 - eps)
    pos = T.mul(gt, T.log(p))
    neg = T.mul(T.sub(1.0, gt), T.log(T.sub(1.0, p)))
    return T.scale(T.mean(T.add(pos, neg)), -1.0)


def iou_loss(pred: Tensor, gt: Tensor, smooth: float = IOU_SMOOTH) -> Tensor:
    """``1 - (sum(p*g) + s) / (sum(p + g - p*g) + s)``."""
    _check_shapes(pred, gt, "iou_loss")
    inter = T.sum_(T.mul(pred, gt))
    union = T.sum_(T.sub(T.add(pred, gt), T.mul(pred, gt)))
    ratio = T.div(T.add(inter, smooth), T.add(union, smooth))
    return T.sub(1.0, ratio)


@dataclass
class LossReport:
    levels: tuple  # 1-based level ids that were summed
    bce: list
    iou: list
    total: Tensor

    def terms(self) -> list[float]:
        out = []
        for b, i in zip(self.bce, self.iou):
            out.extend([b.item(), i.item()])
        return out

    def as_dict(self) -> dict[str, float]:
        d = {}
        for lvl, b, i in zip(self.levels, self.bce, self.iou):
            d[f"bce{lvl}"] = b.item()
            d[f"iou{lvl}"] = i.item()
        d["total"] = self.total.item()
        return d


def resize_nearest(gt: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D map (keeps binary values binary)."""
    gh, gw = gt.shape
    rows = np.minimum(((np.arange(h) + 0.5) * gh / h).astype(np.intp), gh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * gw / w).astype(np.intp), gw - 1)
    return gt[np.ix_(rows, cols)]


def as_target(gt, h: int, w: int) -> Tensor:
    """A 1 x h x w target tensor from a map of any size."""
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    if arr.shape != (h, w):
        arr = resize_nearest(arr, h, w)
    return Tensor(arr[None])


def total_loss(
    preds: Sequence[Tensor],
    gt,
    levels: Sequence[int] = (1, 2, 3, 4, 5),
) -> LossReport:
    """Sum of BCE and IoU over the requested levels of input-resolution predictions."""
    preds = list(preds)
    if len(preds) < 5:
        raise ValueError(f"expected five upsampled predictions, got {len(preds)}")
    h, w = preds[0].shape[-2:]
    target = as_target(gt, h, w)
    bces, ious = [], []
    total = None
    for lvl in levels:
        if not 1 <= lvl <= 5:
            raise ValueError(f"no prediction level {lvl}")
        p = preds[lvl - 1]
        b, i = bce_loss(p, target), iou_loss(p, target)
        bces.append(b)
        ious.append(i)
        total = b if total is None else T.add(total, b)
        total = T.add(total, i)
    if total is None:
        raise ValueError("no levels selected")
    return LossReport(tuple(levels), bces, ious, total)
