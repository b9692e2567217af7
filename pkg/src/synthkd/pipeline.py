"""Glue that turns a RunConfig into datasets, models and trained artifacts."""

from __future__ import annotations

import csv
from pathlib import Path

from .config import RunConfig
from .data import RealDataset, ToySpec, generate_toy
from .diffusion import GenConfig, NoiseSchedule, make_schedule
from .distill import DistillConfig
from .nets import Classifier, Denoiser

_toy_cache: dict = {}


def toy_splits(cfg: RunConfig) -> tuple[RealDataset, RealDataset]:
    spec = ToySpec(**cfg["toy"])
    if spec not in _toy_cache:
        _toy_cache[spec] = generate_toy(spec)
    return _toy_cache[spec]


def schedule(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(**cfg["schedule"])


def new_denoiser(cfg: RunConfig) -> Denoiser:
    d = cfg["denoiser"]
    return Denoiser(cfg["toy"]["num_classes"], d["width"], d["embed_dim"], cfg["schedule"]["T_train"], d["seed"])


def new_classifier(cfg: RunConfig, tier: str, seed: int) -> Classifier:
    return Classifier(tier, cfg["toy"]["num_classes"], seed)


def distill_config(cfg: RunConfig, seed: int, **overrides) -> DistillConfig:
    d = dict(cfg["distill"], seed=seed)
    d["milestones"] = tuple(d["milestones"])
    d.update(overrides)
    return DistillConfig(**d)


def gen_config(cfg: RunConfig, **overrides) -> GenConfig:
    g = dict(cfg["gen"])
    g.update({k: v for k, v in overrides.items() if v is not None})
    return GenConfig(s=float(g["s"]), T_sample=int(g["T_sample"]),
                     per_class_count=int(g["per_class_count"]), seed=int(g["seed"]))


def write_rows(path, rows: list[dict], fields: list[str]) -> Path:
    """RFC-4180 CSV with a fixed header; missing fields are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore", lineterminator="\r\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path
