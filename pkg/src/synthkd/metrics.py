"""Accuracy, teacher behaviour on synthetic data, and output smoothness."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


def _logits(model, images: np.ndarray) -> np.ndarray:
    if hasattr(model, "predict"):
        return np.asarray(model.predict(images))
    return np.asarray(model(images))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def accuracy(model, dataset) -> float:
    """Top-1 accuracy; ``argmax`` breaks ties toward the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    logits = _logits(model, dataset.images)
    if logits.shape[1] != dataset.num_classes:
        raise ConfigError(f"model emits {logits.shape[1]} classes, dataset has {dataset.num_classes}")
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def prob_variance(probs: np.ndarray) -> float:
    """Mean over samples of the population variance across the K probabilities."""
    return float(np.mean(np.var(probs, axis=1)))


def dist_variance(model, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("dist_variance of an empty dataset is undefined")
    return prob_variance(_softmax(_logits(model, dataset.images).astype(np.float64)))


@dataclass
class MetricsRecord:
    name: str
    value: float
    context: dict = field(default_factory=dict)


CONTEXT_FIELDS = ("dataset_digest", "model_digest", "s", "T_sample", "tau", "seed")


def teacher_eval_on_synthetic(teacher, synthetic) -> dict:
    """Teacher accuracy against generating labels, mean top-1 confidence and dist_variance."""
    if getattr(teacher, "num_classes", synthetic.num_classes) != synthetic.num_classes:
        raise ConfigError(f"teacher has {teacher.num_classes} classes, dataset {synthetic.num_classes}")
    if len(synthetic) == 0:
        raise ValueError("empty synthetic dataset")
    logits = _logits(teacher, synthetic.images).astype(np.float64)
    probs = _softmax(logits)
    prov = getattr(synthetic, "provenance", {}) or {}
    context = {
        "dataset_digest": synthetic.digest() if hasattr(synthetic, "digest") else None,
        "model_digest": teacher.digest() if hasattr(teacher, "digest") else None,
        "s": prov.get("s"), "T_sample": prov.get("T_sample"), "tau": None, "seed": prov.get("seed"),
    }
    return {
        "accuracy": float(np.mean(np.argmax(logits, axis=1) == synthetic.labels)),
        "confidence": float(np.mean(probs.max(axis=1))),
        "dist_variance": prob_variance(probs),
        "context": context,
    }


def records_from_eval(result: dict) -> list[MetricsRecord]:
    return [MetricsRecord(k, result[k], dict(result["context"])) for k in ("accuracy", "confidence", "dist_variance")]


def write_metrics_csv(records: list[MetricsRecord], path, append: bool = False) -> Path:
    """One row per record under a fixed header, RFC-4180 quoting."""
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        if new:
            w.writerow(("name", "value") + CONTEXT_FIELDS)
        for r in records:
            w.writerow([r.name, repr(float(r.value))] + ["" if r.context.get(k) is None else r.context[k]
                                                         for k in CONTEXT_FIELDS])
    return path


def as_row(record: MetricsRecord) -> dict:
    return asdict(record)
