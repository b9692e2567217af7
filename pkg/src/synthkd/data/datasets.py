from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


def quantize(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to bytes by affine rounding; out-of-range values are clamped."""
    x = np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


@dataclass
class RealDataset:
    """Images in [-1, 1] with shape (N, 1, H, W) and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ValueError("images outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def subset(self, idx) -> "RealDataset":
        return RealDataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


@dataclass
class SyntheticDataset:
    """Generated images stored as bytes, their generating labels, and provenance.

    ``images`` dequantizes on access, so in-memory and reloaded datasets
    feed identical values to training.
    """

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or len(self.pixels) != len(self.labels):
            raise ValueError(f"pixels {self.pixels.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    @property
    def images(self) -> np.ndarray:
        return dequantize(self.pixels)

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.pixels.tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<u2").tobytes())
        return h.hexdigest()

    def per_class(self, n: int) -> "SyntheticDataset":
        """The first ``n`` images of every class, in stored order."""
        keep = np.zeros(len(self), dtype=bool)
        for k in np.unique(self.labels):
            keep[np.flatnonzero(self.labels == k)[:n]] = True
        prov = dict(self.provenance, per_class_count=int(n))
        return SyntheticDataset(self.pixels[keep], self.labels[keep], self.num_classes, prov)
