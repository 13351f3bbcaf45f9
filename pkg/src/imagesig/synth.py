"""Synthetic two-class image set standing in for the non-redistributable datasets.

``gradient`` images are smooth left-to-right blends between two random
colours. ``stripes`` images carry high-frequency vertical stripes whose
three colour channels are phase-shifted, so every row traces loops in
colour space. Both get mild pixel noise.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import substream

log = logging.getLogger(__name__)

CLASSES = ("gradient", "stripes")


def gradient_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    t = np.linspace(0.0, 1.0, size)
    t = t ** rng.uniform(0.6, 1.6)
    row = c0 + (c1 - c0) * t[:, None]
    img = np.broadcast_to(row, (size, size, 3)) + rng.normal(0.0, 0.03, (size, size, 3))
    return np.clip(img, 0.0, 1.0)


def stripes_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=3)
    amp = rng.uniform(0.1, 0.3)
    period = rng.uniform(4.0, 10.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    turn = rng.choice([-1.0, 1.0])
    x = np.arange(size)[:, None]
    shifts = turn * 2 * np.pi * np.arange(3) / 3
    row = base + amp * np.sin(2 * np.pi * x / period + phase + shifts)
    img = np.broadcast_to(row, (size, size, 3)) + rng.normal(0.0, 0.03, (size, size, 3))
    return np.clip(img, 0.0, 1.0)


def write_synthetic(root, n_per_class: int, seed: int = 0, start: int = 0, size: int = 64) -> list[Path]:
    """Write ``n_per_class`` PNGs per class under ``root/<class>/``.

    Image ``i`` of a class depends only on (seed, class, start + i), so a
    non-overlapping ``start`` gives a disjoint test set from the same seed.
    """
    if n_per_class < 0:
        raise ValueError("n_per_class must be >= 0")
    if n_per_class == 0:
        log.warning("n_per_class is 0: creating empty class directories")
    root = Path(root)
    makers = (gradient_image, stripes_image)
    written = []
    for cls_idx, (name, make) in enumerate(zip(CLASSES, makers)):
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(start, start + n_per_class):
            img = make(substream(seed, "synth", cls_idx, i), size)
            path = cdir / f"{name}_{i:05d}.png"
            Image.fromarray(np.rint(img * 255).astype(np.uint8)).save(path)
            written.append(path)
    return written
