"""Desk-scale synthetic dataset: three geometric pattern classes.

Stand-in for real radiographs when exercising the full pipeline without the
original data. Classes are visually distinct: a filled disk, horizontal
bars, and a checkerboard, each with per-image jitter plus Gaussian pixel
noise. Images are written as 8-bit grayscale-replicated PNGs in the
standard root/{split}/{class}/ layout.
"""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

PATTERN_CLASSES = ("disk", "bars", "checker")


def pattern_image(
    pattern: str, rng: np.random.Generator, size: int = 80, noise: float = 0.1
) -> np.ndarray:
    """One (3, size, size) float image in [0, 1] for the named pattern."""
    bg = 0.2
    fg = 0.8
    canvas = np.full((size, size), bg, dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]

    if pattern == "disk":
        r = size * rng.uniform(0.22, 0.32)
        cy = size / 2 + rng.uniform(-0.1, 0.1) * size
        cx = size / 2 + rng.uniform(-0.1, 0.1) * size
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = fg
    elif pattern == "bars":
        period = int(rng.integers(8, 17))
        phase = int(rng.integers(0, period))
        canvas[((yy + phase) % period) < period // 2] = fg
    elif pattern == "checker":
        cell = int(rng.integers(6, 13))
        py = int(rng.integers(0, cell))
        px = int(rng.integers(0, cell))
        mask = (((yy + py) // cell) + ((xx + px) // cell)) % 2 == 0
        canvas[mask] = fg
    else:
        raise ValueError(f"unknown pattern {pattern!r}, expected one of {PATTERN_CLASSES}")

    if noise > 0:
        canvas = canvas + rng.normal(0.0, noise, canvas.shape).astype(np.float32)
    canvas = np.clip(canvas, 0.0, 1.0)
    return np.repeat(canvas[None], 3, axis=0)


def write_dataset(
    root,
    counts: Mapping[str, Sequence[int]],
    seed: int = 0,
    size: int = 80,
    noise: float = 0.1,
    class_names: Sequence[str] = PATTERN_CLASSES,
) -> Path:
    """Generate root/{split}/{class}/NNNN.png; ``counts`` maps split name to
    per-class image counts in ``class_names`` order. Returns the root path."""
    if len(class_names) != len(PATTERN_CLASSES):
        raise ValueError(f"exactly {len(PATTERN_CLASSES)} classes are supported")
    root = Path(root)
    for split, per_class in counts.items():
        if len(per_class) != len(class_names):
            raise ValueError(f"split {split!r}: expected {len(class_names)} counts")
        for cls_i, (cls, n) in enumerate(zip(class_names, per_class)):
            d = root / split / cls
            d.mkdir(parents=True, exist_ok=True)
            split_key = zlib.crc32(split.encode("utf-8"))
            for i in range(n):
                rng = np.random.default_rng((seed, split_key, cls_i, i))
                img = pattern_image(PATTERN_CLASSES[cls_i], rng, size=size, noise=noise)
                arr = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
                Image.fromarray(arr).save(d / f"{i:04d}.png")
    return root
