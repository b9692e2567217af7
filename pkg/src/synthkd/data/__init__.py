"""Toy data, external IDX ingestion and persistence."""

from .datasets import RealDataset, SyntheticDataset, dequantize, quantize
from .idx import load_idx, write_idx
from .storage import (
    load_checkpoint,
    load_synthetic,
    read_manifest,
    save_checkpoint,
    save_synthetic,
)
from .toy import SHAPE_NAMES, ToySpec, generate_toy

__all__ = [
    "RealDataset", "SyntheticDataset", "ToySpec", "SHAPE_NAMES", "generate_toy",
    "load_idx", "write_idx", "quantize", "dequantize",
    "save_synthetic", "load_synthetic", "save_checkpoint", "load_checkpoint", "read_manifest",
]
