"""Procedural 16x16 grayscale shape classes.

Every family is symmetric under a horizontal flip, so flip augmentation
never changes the correct label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .datasets import RealDataset


def _disk(x, y):
    return 0.9 - np.hypot(x, y)


def _ring(x, y):
    return 0.16 - np.abs(np.hypot(x, y) - 0.7)


def _square(x, y):
    return 0.72 - np.maximum(np.abs(x), np.abs(y))


def _frame(x, y):
    return 0.14 - np.abs(np.maximum(np.abs(x), np.abs(y)) - 0.72)


def _plus(x, y):
    ax, ay = np.abs(x), np.abs(y)
    return np.maximum(np.minimum(0.22 - ax, 0.95 - ay), np.minimum(0.22 - ay, 0.95 - ax))


def _xcross(x, y):
    r = np.sqrt(0.5)
    return _plus(r * (x + y), r * (y - x))


def _hbars(x, y):
    nearest = np.abs(y - np.clip(np.round(y / 0.6), -1, 1) * 0.6)
    return np.minimum(0.9 - np.abs(x), 0.14 - nearest)


def _vbars(x, y):
    return _hbars(y, x)


def _checker(x, y):
    # a cell is centred on each axis so the pattern is its own mirror image
    a, b = x / 0.45 + 0.5, y / 0.45 + 0.5
    parity = (np.floor(a) + np.floor(b)) % 2
    edge = np.minimum(np.abs(a - np.round(a)), np.abs(b - np.round(b))) * 0.45
    inside = np.where(parity == 0, edge, -edge)
    return np.minimum(0.9 - np.maximum(np.abs(x), np.abs(y)), inside)


def _triangle(x, y):
    # apex at the top, base at the bottom; edges as half-planes
    n = np.hypot(1.7, 0.85)
    left = (1.7 * x + 0.85 * y + 0.72) / n
    right = (-1.7 * x + 0.85 * y + 0.72) / n
    base = 0.75 - y
    return np.minimum(np.minimum(left, right), base)


def _diamond(x, y):
    return (0.95 - (np.abs(x) + np.abs(y))) * np.sqrt(0.5)


def _dots(x, y):
    d = np.minimum(np.hypot(np.abs(x) - 0.5, np.abs(y) - 0.5), 1.0)
    return 0.28 - d


SHAPES = {
    "disk": _disk, "ring": _ring, "square": _square, "frame": _frame,
    "plus": _plus, "xcross": _xcross, "hbars": _hbars, "vbars": _vbars,
    "checker": _checker, "triangle": _triangle, "diamond": _diamond, "dots": _dots,
}
SHAPE_NAMES = list(SHAPES)

_SPLIT_CODE = {"train": 0, "test": 1}


@dataclass(frozen=True)
class ToySpec:
    num_classes: int = 10
    size: int = 16
    train_per_class: int = 500
    test_per_class: int = 100
    seed: int = 0
    noise: float = 0.08


def render(shape: str, n: int, rng: np.random.Generator, size: int = 16, noise: float = 0.08) -> np.ndarray:
    """``n`` jittered renders of one family, shape (n, 1, size, size)."""
    sdf = SHAPES[shape]
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing="ij")
    cx = rng.uniform(-0.2, 0.2, n)[:, None, None]
    cy = rng.uniform(-0.2, 0.2, n)[:, None, None]
    scale = rng.uniform(0.6, 0.9, n)[:, None, None]
    fg = rng.uniform(0.4, 1.0, n)[:, None, None]
    bg = rng.uniform(-1.0, -0.6, n)[:, None, None]
    d = sdf((u - cx) / scale, (v - cy) / scale) * scale
    pixel = 2.0 / size
    cover = np.clip(0.5 + d / pixel, 0.0, 1.0)
    img = bg + (fg - bg) * cover + noise * rng.standard_normal((n, size, size))
    return np.clip(img, -1.0, 1.0)[:, None].astype(np.float32)


def generate_toy(spec: ToySpec = ToySpec()) -> tuple[RealDataset, RealDataset]:
    """Class-balanced train and test splits, deterministic in ``spec.seed``.

    Each (split, class) pair draws from its own seed-sequence substream.
    """
    if not 1 <= spec.num_classes <= len(SHAPES):
        raise ConfigError(f"num_classes={spec.num_classes} exceeds the {len(SHAPES)} available shape families")
    out = []
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        images, labels = [], []
        for k in range(spec.num_classes):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SPLIT_CODE[split], k]))
            images.append(render(SHAPE_NAMES[k], per_class, rng, spec.size, spec.noise))
            labels.append(np.full(per_class, k))
        out.append(RealDataset(np.concatenate(images), np.concatenate(labels), split, spec.num_classes))
    return out[0], out[1]
