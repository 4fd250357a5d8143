"""Service defaults, overridable from a JSON key-value config file."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

DATA_ROOT_ENV = "ICUCAST_DATA_ROOT"


@dataclass
class ServiceConfig:
    dt: float = 0.25
    mc_samples: int = 200
    repetitions: int = 100
    trend_steps: int = 800
    trend_anchors: int = 48
    hazard_horizon: int = 30
    search_budget: int = 0  # 0 disables pipeline search
    search_folds: int = 3
    seed: int = 0

    @staticmethod
    def load(path: Optional[str] = None) -> "ServiceConfig":
        cfg = ServiceConfig()
        if path:
            raw = json.loads(Path(path).read_text())
            known = {f.name for f in fields(ServiceConfig)}
            unknown = set(raw) - known
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            for key, value in raw.items():
                setattr(cfg, key, type(getattr(cfg, key))(value))
        return cfg


def resolve_data_root(explicit: Optional[str] = None) -> Path:
    root = explicit or os.environ.get(DATA_ROOT_ENV) or "./icucast-data"
    return Path(root)
