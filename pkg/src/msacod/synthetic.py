"""Procedural textured-shape images with exact masks for the overfit demo."""

from __future__ import annotations

import numpy as np


def _texture(rng: np.random.Generator, h: int, w: int, freq: float, angle: float, base, amp: float):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    noise = rng.normal(0.0, 0.04, size=(h, w))
    img = np.asarray(base, dtype=np.float64)[:, None, None] + amp * wave[None] + noise[None]
    return np.clip(img, 0.0, 1.0)


# Foreground layouts on a 2x2 grid of blocks: (top-left, top-right, bottom-left, bottom-right).
LAYOUTS = (
    (1, 0, 1, 0),
    (1, 1, 0, 0),
    (0, 1, 0, 1),
    (0, 0, 1, 1),
)


def make_sample(index: int, size: int = 64, seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """One ``3 x size x size`` image and its ``size x size`` binary mask.

    Shapes are unions of grid-aligned blocks, so every side output down to
    stride 32 can represent the mask.
    """
    rng = np.random.default_rng([seed, index])
    layout = LAYOUTS[index % len(LAYOUTS)]
    half = size // 2
    mask = np.zeros((size, size))
    for k, on in enumerate(layout):
        if on:
            r, c = divmod(k, 2)
            mask[r * half : (r + 1) * half, c * half : (c + 1) * half] = 1.0

    ground = _texture(rng, size, size, freq=0.9, angle=rng.uniform(0, np.pi), base=(0.25, 0.35, 0.2), amp=0.12)
    shape = _texture(rng, size, size, freq=0.45, angle=rng.uniform(0, np.pi), base=(0.75, 0.6, 0.45), amp=0.12)
    img = np.where(mask[None] > 0.5, shape, ground)
    return img, mask


def make_dataset(n: int = 4, size: int = 64, seed: int = 7) -> list[tuple[np.ndarray, np.ndarray]]:
    return [make_sample(i, size=size, seed=seed) for i in range(n)]
