"""JSON run configuration with canonical digesting."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .data.storage import canonical_json, sha256
from .errors import ConfigError

DEFAULTS: dict[str, dict] = {
    "toy": {"num_classes": 10, "size": 16, "train_per_class": 500, "test_per_class": 100,
            "seed": 0, "noise": 0.08},
    "schedule": {"T_train": 400, "beta_min": 1e-4, "beta_max": 0.02},
    "denoiser": {"width": 16, "embed_dim": 64, "epochs": 40, "batch": 64, "lr": 2e-3,
                 "cond_dropout_p": 0.1, "ema_decay": 0.999, "seed": 0},
    "teacher": {"tier": "M", "epochs": 15, "lr": 0.05, "batch_size": 64, "weight_decay": 5e-4, "seed": 0},
    "student": {"tier": "S", "seed": 0},
    "gen": {"s": 2.0, "T_sample": 100, "per_class_count": 1000, "seed": 0},
    "distill": {"tau": 10.0, "soft_weight": 1.0, "hard_weight": 0.0, "epochs": 20, "batch_size": 64,
                "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4,
                "milestones": [0.625, 0.75, 0.875], "gamma": 0.1, "flip": True},
    "sweep": {
        "seeds": [0, 1, 2],
        "s": 2.0,
        "T_sample": 50,
        "per_class_count": 50,
        "fidelity_s": [1.0, 2.0, 4.0],
        "fidelity_T": [50, 100, 250],
        "taus": [1.0, 2.0, 4.0, 10.0, 20.0],
        "teacher_tiers": ["S", "M", "L"],
        "student_tiers": ["S", "M"],
        "diversity_per_class": [25, 50, 100],
        "diversity_total": 20000,
        "scale_per_class": [10, 25, 50, 100],
        "workers": None,
    },
}


class RunConfig:
    """Resolved configuration: defaults overlaid with a user document.

    Unknown sections or keys are rejected so that typos fail loudly instead
    of silently running the default.
    """

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        self.data = copy.deepcopy(DEFAULTS)
        for section, values in doc.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(DEFAULTS)}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                self.data[section][key] = value

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        return cls(doc)

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def with_overrides(self, section: str, **values) -> "RunConfig":
        doc = copy.deepcopy(self.data)
        doc[section].update({k: v for k, v in values.items() if v is not None})
        return RunConfig(doc)

    def canonical(self) -> str:
        return canonical_json(self.data)

    def digest(self) -> str:
        return sha256(self.canonical().encode())[:16]
