"""Distillation losses and the teacher / student training loops."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .data.datasets import RealDataset, SyntheticDataset
from .errors import ConfigError, NumericalError, ShapeError
from .optim import SGD, step_lr


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 10.0
    soft_weight: float = 1.0
    hard_weight: float = 0.0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[float, ...] = (0.625, 0.75, 0.875)
    gamma: float = 0.1
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.soft_weight < 0 or self.hard_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.soft_weight == 0 and self.hard_weight == 0:
            raise ConfigError("soft_weight and hard_weight cannot both be zero")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def soften(q, tau: float = 1.0) -> np.ndarray:
    """``softmax(q / tau)`` along the last axis, computed in float64."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return _softmax(np.asarray(q, dtype=np.float64) / tau)


def kd_loss(q_t, q_s: Array, tau: float) -> Array:
    """``tau**2 * KL(softmax(q_t / tau) || softmax(q_s / tau))``, batch-averaged.

    ``q_t`` is treated as a constant: gradients reach only the student logits.
    Accepts single logit vectors (K,) or batches (B, K).
    """
    q_t = np.asarray(q_t.data if isinstance(q_t, Array) else q_t)
    if not isinstance(q_s, Array):
        q_s = Array(q_s)
    if q_t.shape != q_s.shape:
        raise ShapeError(f"kd_loss: teacher logits {q_t.shape} vs student logits {q_s.shape}")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if not (np.all(np.isfinite(q_t)) and np.all(np.isfinite(q_s.data))):
        raise NumericalError("kd_loss: non-finite logits")
    if q_s.ndim == 1:
        q_t = q_t[None]
        q_s = ad.reshape(q_s, (1, -1))
    n = q_s.shape[0]
    zt = q_t.astype(q_s.dtype) / tau
    p_t = _softmax(zt)
    log_p_t = _log_softmax(zt)
    log_p_s = ad.log_softmax(ad.mul(q_s, 1.0 / tau))
    kl = ad.sum(ad.mul(Array(p_t), ad.sub(Array(log_p_t), log_p_s)))
    return ad.mul(kl, tau * tau / n)


def hard_label_loss(q_s: Array, label) -> Array:
    """Cross-entropy of ``softmax(q_s)`` against integer labels, batch-averaged."""
    if not isinstance(q_s, Array):
        q_s = Array(q_s)
    label = np.asarray(label)
    if q_s.ndim == 1:
        q_s = ad.reshape(q_s, (1, -1))
        label = label.reshape(1)
    k = q_s.shape[1]
    if label.size and (label.min() < 0 or label.max() >= k):
        raise IndexError(f"label outside [0, {k})")
    return ad.mul(ad.mean(ad.pick(ad.log_softmax(q_s), label.astype(np.int64))), -1.0)


def evaluate_accuracy(model, images: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(model.predict(images), axis=1)
    return float(np.mean(pred == labels))


def _flip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


@dataclass
class TrainResult:
    final_accuracy: float
    best_accuracy: float
    rows: list[dict] = field(default_factory=list)


def train_teacher(classifier, real_train: RealDataset, real_test: RealDataset, epochs: int = 15,
                  lr: float = 0.05, batch_size: int = 64, seed: int = 0, weight_decay: float = 5e-4,
                  flip: bool = True):
    """Cross-entropy SGD on real data; returns ``(classifier, TrainResult)``."""
    if real_train.num_classes != classifier.num_classes:
        raise ConfigError("dataset and classifier disagree on the number of classes")
    rng = np.random.default_rng(seed)
    opt = SGD(classifier.parameters(), lr, momentum=0.9, weight_decay=weight_decay)
    x_all, y_all = real_train.images, real_train.labels
    rows = []
    accs = []
    for epoch in range(epochs):
        opt.lr = step_lr(lr, epoch, epochs)
        order = rng.permutation(len(x_all))
        flips = rng.random(len(x_all)) < 0.5 if flip else np.zeros(len(x_all), bool)
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = np.where(flips[idx, None, None, None], _flip(x_all[idx]), x_all[idx])
            with ad.Tape():
                loss = hard_label_loss(classifier.forward(Array(x)), y_all[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite teacher loss in epoch {epoch}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        acc = evaluate_accuracy(classifier, real_test.images, real_test.labels)
        accs.append(acc)
        rows.append({"epoch": epoch, "split": "train", "loss": total / count, "accuracy": float("nan"), "seed": seed})
        rows.append({"epoch": epoch, "split": "test", "loss": float("nan"), "accuracy": acc, "seed": seed})
    if not accs:
        acc = evaluate_accuracy(classifier, real_test.images, real_test.labels)
        accs.append(acc)
    return classifier, TrainResult(accs[-1], max(accs), rows)


def train_student(student, teacher, synthetic: SyntheticDataset, real_test: RealDataset,
                  config: DistillConfig = DistillConfig()):
    """Fit ``student`` to a frozen ``teacher`` on synthetic images.

    Loss per batch is ``soft_weight * kd_loss + hard_weight * hard_label_loss``
    where hard labels are the generating classes.  Real-test accuracy is
    recorded after every epoch.  Returns ``(student, TrainResult)``.
    """
    if student.num_classes != teacher.num_classes or synthetic.num_classes != student.num_classes:
        raise ConfigError(f"class-count mismatch: teacher {teacher.num_classes}, "
                          f"student {student.num_classes}, data {synthetic.num_classes}")
    rng = np.random.default_rng(config.seed)
    x_all, y_all = synthetic.images, synthetic.labels
    # the teacher is read-only, so its logits for both orientations are computed once
    t_plain = teacher.predict(x_all) if config.soft_weight else None
    t_flip = teacher.predict(_flip(x_all).copy()) if config.soft_weight and config.flip else t_plain
    opt = SGD(student.parameters(), config.lr, config.momentum, config.weight_decay)
    digest = config.digest()
    rows = []
    accs = []
    for epoch in range(config.epochs):
        opt.lr = step_lr(config.lr, epoch, config.epochs, config.milestones, config.gamma)
        order = rng.permutation(len(x_all))
        flips = rng.random(len(x_all)) < 0.5 if config.flip else np.zeros(len(x_all), bool)
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            f = flips[idx]
            x = np.where(f[:, None, None, None], _flip(x_all[idx]), x_all[idx])
            with ad.Tape():
                q_s = student.forward(Array(x))
                terms = []
                if config.soft_weight:
                    q_t = np.where(f[:, None], t_flip[idx], t_plain[idx])
                    terms.append(ad.mul(kd_loss(q_t, q_s, config.tau), config.soft_weight))
                if config.hard_weight:
                    terms.append(ad.mul(hard_label_loss(q_s, y_all[idx]), config.hard_weight))
                loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite student loss in epoch {epoch}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        acc = evaluate_accuracy(student, real_test.images, real_test.labels)
        accs.append(acc)
        rows.append({"epoch": epoch, "split": "synthetic", "loss": total / count, "accuracy": float("nan"),
                     "seed": config.seed, "config_digest": digest})
        rows.append({"epoch": epoch, "split": "test", "loss": float("nan"), "accuracy": acc,
                     "seed": config.seed, "config_digest": digest})
    if not accs:
        accs.append(evaluate_accuracy(student, real_test.images, real_test.labels))
    return student, TrainResult(accs[-1], max(accs), rows)
