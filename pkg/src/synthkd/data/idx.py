"""Reader (and fixture writer) for the big-endian IDX image/label format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .datasets import RealDataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise FormatError(f"{path}: truncated payload, {len(raw) - header} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def area_resample(img: np.ndarray, size: int) -> np.ndarray:
    """Resample (N, H, W) to (N, size, size) by exact area averaging."""

    def weights(src: int) -> np.ndarray:
        edges_dst = np.linspace(0.0, 1.0, size + 1)
        edges_src = np.linspace(0.0, 1.0, src + 1)
        lo = np.maximum(edges_dst[:-1, None], edges_src[None, :-1])
        hi = np.minimum(edges_dst[1:, None], edges_src[None, 1:])
        return np.clip(hi - lo, 0.0, None) * size

    _, h, w = img.shape
    if h == size and w == size:
        return img.astype(np.float64)
    return np.einsum("ih,nhw,jw->nij", weights(h), img.astype(np.float64), weights(w))


def load_idx(images_path, labels_path, size: int = 16, num_classes: int | None = None,
             split: str = "external") -> RealDataset:
    images = _read(images_path, IMAGE_MAGIC, 3)
    labels = _read(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    scaled = images.astype(np.float64) / 127.5 - 1.0
    resampled = np.clip(area_resample(scaled, size), -1.0, 1.0)
    k = int(num_classes if num_classes is not None else (labels.max() + 1 if labels.size else 1))
    return RealDataset(resampled[:, None].astype(np.float32), labels.astype(np.int64), split, k)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())
