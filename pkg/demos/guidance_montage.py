"""
Toy classes and guided samples
==============================

Renders a few real toy images per class next to samples drawn at guidance
scales 1, 2 and 4, and prints how a teacher scores each set.

    python3 demos/guidance_montage.py --denoiser dn.ckpt --teacher t.ckpt

Checkpoints come from ``synthkd train-diffusion`` and ``synthkd
train-teacher``.  Without them a small denoiser and teacher are trained
first, which takes a few minutes and gives blurrier samples.
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from synthkd.config import RunConfig
from synthkd.data import load_checkpoint
from synthkd.diffusion import GenConfig, generate_dataset, train_denoiser
from synthkd.distill import train_teacher
from synthkd.metrics import teacher_eval_on_synthetic
from synthkd.nets import Classifier, Denoiser
from synthkd.pipeline import schedule, toy_splits

parser = argparse.ArgumentParser()
parser.add_argument("--denoiser")
parser.add_argument("--teacher")
parser.add_argument("--per-class", type=int, default=4)
parser.add_argument("--steps", type=int, default=50)
parser.add_argument("--out", default="guidance.png")
args = parser.parse_args()

cfg = RunConfig()
train, test = toy_splits(cfg)
sched = schedule(cfg)

if args.denoiser:
    denoiser, _ = load_checkpoint(args.denoiser)
else:
    print("training a small denoiser (width 8, 6 epochs)")
    denoiser, trace = train_denoiser(Denoiser(width=8, seed=0), train, sched, epochs=6, lr=2e-3)
    print(f"  loss {trace.initial:.3f} -> {trace.final:.3f}")

if args.teacher:
    teacher, _ = load_checkpoint(args.teacher)
else:
    print("training a tier-S teacher")
    teacher, res = train_teacher(Classifier("S", seed=0), train, test, epochs=5)
    print(f"  real-test accuracy {res.final_accuracy:.3f}")

###############################################################################
# One synthetic set per guidance scale, same seed, so the starting noise is
# shared and only the guidance differs.

scales = (1.0, 2.0, 4.0)
sets = {}
for s in scales:
    sets[s] = generate_dataset(denoiser, sched, GenConfig(s=s, T_sample=args.steps, per_class_count=args.per_class))
    ev = teacher_eval_on_synthetic(teacher, sets[s])
    print(f"s={s:g}: teacher accuracy {ev['accuracy']:.3f}, confidence {ev['confidence']:.3f}, "
          f"dist_variance {ev['dist_variance']:.5f}")

###############################################################################
# Montage: rows are classes, column groups are real images then each scale.

k, n = cfg["toy"]["num_classes"], args.per_class


def strip(images, labels, cls):
    picked = images[labels == cls][:n, 0]
    return np.concatenate(list(picked), axis=1)


groups = [("real", train.images, train.labels)] + [(f"s={s:g}", sets[s].images, sets[s].labels) for s in scales]
fig, axes = plt.subplots(1, len(groups), figsize=(3 * len(groups), 7))
for ax, (title, images, labels) in zip(axes, groups):
    ax.imshow(np.concatenate([strip(images, labels, c) for c in range(k)], axis=0), cmap="gray", vmin=-1, vmax=1)
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(args.out, dpi=120)
print(f"wrote {args.out}")
