"""PNG reading/writing, directory pairing and report emission."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .metrics import GrayMap, MetricReport, N_THRESHOLDS

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(ValueError):
    """Unreadable, mismatched or missing input data."""


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return img


def load_gray_png(path) -> GrayMap:
    """8-bit grayscale (or luma-converted colour) image as values/255."""
    img = _open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I", "F") or img.mode.startswith("I;16"):
        raise DataError(f"{path}: unsupported bit depth (mode {img.mode}); only 8-bit images are accepted")
    if img.mode != "L":
        img = img.convert("L")
    arr = np.asarray(img, dtype=np.uint8)
    return GrayMap(arr.astype(np.float64) / 255.0, path=str(path))


def load_rgb(path) -> np.ndarray:
    """Colour image as a ``3 x H x W`` float array in [0, 1]."""
    img = _open(path)
    if img.mode.startswith("I") or img.mode == "F":
        raise DataError(f"{path}: unsupported bit depth (mode {img.mode})")
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def quantize(values: np.ndarray) -> np.ndarray:
    """Round-half-up to 8 bits."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_gray_png(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D map, got shape {arr.shape}")
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# pairing
# ---------------------------------------------------------------------------


@dataclass
class DatasetPairing:
    pairs: list = field(default_factory=list)  # (stem, pred path, gt path)
    skipped: list = field(default_factory=list)  # predictions without ground truth
    missing: list = field(default_factory=list)  # ground truth without prediction

    def __len__(self) -> int:
        return len(self.pairs)


def _index(directory: Path) -> tuple[dict, list]:
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found: dict[str, Path] = {}
    ambiguous = []
    for p in sorted(directory.iterdir()):
        if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem in found:
            ambiguous.append(p.name)
            continue
        found[p.stem] = p
    return found, ambiguous


def pair_directories(pred_dir, gt_dir) -> DatasetPairing:
    """Match files by stem (extension-insensitive), in lexicographic order."""
    preds, amb_p = _index(Path(pred_dir))
    gts, _ = _index(Path(gt_dir))
    pairing = DatasetPairing()
    for stem in sorted(preds):
        if stem in gts:
            pairing.pairs.append((stem, preds[stem], gts[stem]))
        else:
            pairing.skipped.append(preds[stem].name)
    pairing.skipped.extend(amb_p)
    pairing.skipped.sort()
    pairing.missing = sorted(gts[s].name for s in gts if s not in preds)
    return pairing


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.10f}"


def format_summary(report: MetricReport, pairing: DatasetPairing, mismatched: Sequence[str] = ()) -> str:
    """Aggregate scores and bookkeeping as ``key: value`` lines."""
    lines = [f"images: {report.count}"]
    for k, v in report.means.items():
        lines.append(f"{k}: {_fmt(v)}")
    if report.curves is not None:
        lines.append(f"max_fbeta: {_fmt(float(report.curves.fbeta.max()))}")
        lines.append(f"mean_fbeta: {_fmt(float(report.curves.fbeta.mean()))}")
    lines.append("skipped: " + ",".join(pairing.skipped))
    lines.append("missing: " + ",".join(pairing.missing))
    lines.append("mismatched: " + ",".join(mismatched))
    flagged = [f"{r.name}:{'+'.join(r.flags)}" for r in report.images if r.flags]
    lines.append("flags: " + ",".join(flagged))
    return "\n".join(lines) + "\n"


def format_per_image(report: MetricReport) -> str:
    keys = list(report.images[0].scores)
    lines = [",".join(["name"] + keys)]
    for r in report.images:
        lines.append(",".join([r.name] + [_fmt(r.scores[k]) for k in keys]))
    return "\n".join(lines) + "\n"


def format_curves(report: MetricReport) -> str:
    c = report.curves
    lines = ["threshold,precision,recall,fbeta"]
    for i in range(N_THRESHOLDS):
        lines.append(f"{i},{_fmt(c.precision[i])},{_fmt(c.recall[i])},{_fmt(c.fbeta[i])}")
    return "\n".join(lines) + "\n"


def write_reports(out_dir, report: MetricReport, pairing: DatasetPairing, mismatched: Sequence[str] = ()) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "summary.txt": format_summary(report, pairing, mismatched),
        "per_image.csv": format_per_image(report),
    }
    if report.curves is not None:
        files["curves.csv"] = format_curves(report)
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written.append(path)
    return written
