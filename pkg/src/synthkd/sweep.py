"""Experiment grids over guidance, capacity, temperature, labels and dataset size.

Every cell writes its own CSV plus a completion marker holding the cell id
and the CSV digest.  A rerun skips cells whose marker verifies and redoes
cells whose marker is missing, unreadable or stale.  ``<kind>_summary.csv``
groups cells across seeds.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import load_synthetic, save_synthetic
from .data.storage import canonical_json, sha256
from .diffusion import GenConfig, generate_dataset
from .distill import evaluate_accuracy, train_student
from .errors import ConfigError, FormatError
from .metrics import teacher_eval_on_synthetic
from .pipeline import distill_config, new_classifier, schedule, toy_splits, write_rows

log = logging.getLogger(__name__)

KINDS = ("fidelity", "capacity", "temperature", "labels", "diversity", "scale")
LABEL_MODES = {"soft": (1.0, 0.0), "hard": (0.0, 1.0), "both": (1.0, 1.0)}

# Columns that identify a cell apart from its seed, per sweep kind.
AXES = {
    "fidelity": ["s", "T_sample"],
    "capacity": ["teacher_tier", "student_tier"],
    "temperature": ["tau"],
    "labels": ["mode"],
    "diversity": ["per_class_count", "epochs"],
    "scale": ["per_class_count"],
}
METRICS = ["teacher_accuracy", "teacher_confidence", "dist_variance", "teacher_real_accuracy",
           "student_accuracy", "student_best"]
CONTEXT = ["kind", "cell_id", "seed", "config_digest", "denoiser_digest", "teacher_digest", "dataset_digest"]


def grid(kind: str, cfg: RunConfig) -> list[dict]:
    """Cell parameter dicts for ``kind``, seeds innermost."""
    sw = cfg["sweep"]
    k = cfg["toy"]["num_classes"]
    if kind == "fidelity":
        axes = [{"s": float(s), "T_sample": int(t)} for s in sw["fidelity_s"] for t in sw["fidelity_T"]]
    elif kind == "capacity":
        axes = [{"teacher_tier": a, "student_tier": b} for a in sw["teacher_tiers"] for b in sw["student_tiers"]]
    elif kind == "temperature":
        axes = [{"tau": float(t)} for t in sw["taus"]]
    elif kind == "labels":
        axes = [{"mode": m} for m in LABEL_MODES]
    elif kind == "diversity":
        axes = []
        for n in sw["diversity_per_class"]:
            epochs = sw["diversity_total"] // (n * k)
            if epochs < 1:
                raise ConfigError(f"diversity_total={sw['diversity_total']} is smaller than one epoch at {n} per class")
            axes.append({"per_class_count": int(n), "epochs": int(epochs)})
    elif kind == "scale":
        axes = [{"per_class_count": int(n)} for n in sw["scale_per_class"]]
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}; choose from {', '.join(KINDS)}")
    return [dict(a, seed=int(seed)) for a in axes for seed in sw["seeds"]]


class Sweep:
    def __init__(self, kind: str, cfg: RunConfig, out_dir, denoiser, teachers: dict, workers=None):
        if kind not in KINDS:
            raise ConfigError(f"unknown sweep kind {kind!r}; choose from {', '.join(KINDS)}")
        self.kind = kind
        self.cfg = cfg
        self.out = Path(out_dir)
        self.denoiser = denoiser
        self.teachers = teachers
        self.workers = workers if workers is not None else cfg["sweep"]["workers"]
        self.schedule = schedule(cfg)
        self.train, self.test = toy_splits(cfg)
        self.default_tier = cfg["teacher"]["tier"]
        if self.default_tier not in teachers:
            raise ConfigError(f"sweep needs a tier-{self.default_tier} teacher")

    # -- bookkeeping -------------------------------------------------------

    def cell_id(self, params: dict) -> str:
        ident = {"kind": self.kind, "params": params, "config": self.cfg.digest(),
                 "denoiser": self.denoiser.digest(),
                 "teachers": {t: m.digest() for t, m in sorted(self.teachers.items())}}
        return f"{self.kind}-{sha256(canonical_json(ident).encode())[:12]}"

    def _paths(self, cid: str) -> tuple[Path, Path]:
        return self.out / "cells" / f"{cid}.csv", self.out / "cells" / f"{cid}.done"

    def is_complete(self, cid: str) -> bool:
        csv_path, marker = self._paths(cid)
        if not (marker.exists() and csv_path.exists()):
            return False
        try:
            info = json.loads(marker.read_text())
            return info["cell_id"] == cid and info["csv_sha256"] == sha256(csv_path.read_bytes())
        except (ValueError, KeyError, TypeError):
            log.warning("marker for %s is unreadable; rerunning the cell", cid)
            return False

    def _finish(self, cid: str, row: dict) -> None:
        csv_path, marker = self._paths(cid)
        write_rows(csv_path, [row], CONTEXT + AXES[self.kind] + METRICS)
        info = {"cell_id": cid, "csv_sha256": sha256(csv_path.read_bytes()), "completed_at": time.time()}
        marker.write_text(json.dumps(info, sort_keys=True) + "\n")

    # -- synthetic data ------------------------------------------------------

    def synthetic(self, s: float, T_sample: int, per_class: int, seed: int):
        """Generate or reuse a synthetic set; cached sets are shared by all sweep kinds."""
        gc = GenConfig(s=s, T_sample=T_sample, per_class_count=per_class, seed=seed)
        path = self.out / "synthetic" / f"s{s:g}_T{T_sample}_n{per_class}_seed{seed}.skds"
        if path.exists():
            try:
                ds = load_synthetic(path)
                if ds.provenance.get("denoiser_digest") == self.denoiser.digest():
                    return ds
            except FormatError as exc:
                log.warning("discarding cached %s: %s", path.name, exc)
        log.info("generating %s", path.name)
        ds = generate_dataset(self.denoiser, self.schedule, gc, workers=self.workers)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_synthetic(ds, path)
        return ds

    # -- cells ---------------------------------------------------------------

    def _distill(self, teacher, ds, seed: int, student_tier=None, **overrides) -> dict:
        tier = student_tier or self.cfg["student"]["tier"]
        student = new_classifier(self.cfg, tier, seed)
        _, res = train_student(student, teacher, ds, self.test, distill_config(self.cfg, seed, **overrides))
        return {"student_accuracy": res.final_accuracy, "student_best": res.best_accuracy}

    def run_cell(self, params: dict) -> dict:
        sw = self.cfg["sweep"]
        seed = params["seed"]
        teacher = self.teachers[params.get("teacher_tier", self.default_tier)]
        row = dict(params)
        if self.kind == "fidelity":
            ds = self.synthetic(params["s"], params["T_sample"], sw["per_class_count"], seed)
        elif self.kind in ("diversity", "scale"):
            biggest = max(sw[f"{self.kind}_per_class"])
            ds = self.synthetic(float(sw["s"]), sw["T_sample"], biggest, seed).per_class(params["per_class_count"])
        else:
            ds = self.synthetic(float(sw["s"]), sw["T_sample"], sw["per_class_count"], seed)
        ev = teacher_eval_on_synthetic(teacher, ds)
        row.update(teacher_accuracy=ev["accuracy"], teacher_confidence=ev["confidence"],
                   dist_variance=ev["dist_variance"],
                   teacher_real_accuracy=evaluate_accuracy(teacher, self.test.images, self.test.labels))
        if self.kind == "temperature":
            row.update(self._distill(teacher, ds, seed, tau=params["tau"]))
        elif self.kind == "labels":
            soft, hard = LABEL_MODES[params["mode"]]
            row.update(self._distill(teacher, ds, seed, soft_weight=soft, hard_weight=hard))
        elif self.kind == "diversity":
            row.update(self._distill(teacher, ds, seed, epochs=params["epochs"]))
        elif self.kind == "capacity":
            row.update(self._distill(teacher, ds, seed, student_tier=params["student_tier"]))
        else:
            row.update(self._distill(teacher, ds, seed))
        row.update(config_digest=self.cfg.digest(), denoiser_digest=self.denoiser.digest(),
                   teacher_digest=teacher.digest(), dataset_digest=ds.digest())
        return row

    def run(self) -> Path:
        cells = grid(self.kind, self.cfg)
        for n, params in enumerate(cells):
            cid = self.cell_id(params)
            if self.is_complete(cid):
                log.info("[%d/%d] %s complete, skipping", n + 1, len(cells), cid)
                continue
            log.info("[%d/%d] running %s %s", n + 1, len(cells), cid, params)
            row = self.run_cell(params)
            row.update(kind=self.kind, cell_id=cid)
            self._finish(cid, row)
        return self.summarize(cells)

    def cell_rows(self, cells: list[dict] | None = None) -> list[dict]:
        """Completed cell rows (as strings) in grid order."""
        rows = []
        for params in cells if cells is not None else grid(self.kind, self.cfg):
            with open(self._paths(self.cell_id(params))[0], newline="") as f:
                rows.append(next(csv.DictReader(f)))
        return rows

    def summarize(self, cells: list[dict]) -> Path:
        groups: dict[tuple, list[dict]] = {}
        for row in self.cell_rows(cells):
            key = tuple(row[a] for a in AXES[self.kind])
            groups.setdefault(key, []).append(row)
        rows = []
        for key, members in groups.items():
            out = dict(zip(AXES[self.kind], key), kind=self.kind, config_digest=self.cfg.digest(),
                       seeds=" ".join(m["seed"] for m in members), n_seeds=len(members))
            for m in METRICS:
                vals = np.array([float(r[m]) for r in members if r.get(m) not in (None, "")])
                if len(vals):
                    out[f"{m}_mean"] = float(vals.mean())
                    out[f"{m}_std"] = float(vals.std())
            rows.append(out)
        fields = ["kind", "config_digest"] + AXES[self.kind] + ["n_seeds", "seeds"]
        fields += [f"{m}_{stat}" for m in METRICS for stat in ("mean", "std")]
        return write_rows(self.out / f"{self.kind}_summary.csv", rows, fields)
