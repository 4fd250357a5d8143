"""Content-addressed dataset storage with schema validation.

A dataset bundle is a set of CSV tables (hospitals, mobility, admissions and
optionally patients) shipped as text.  Ingestion validates each table, cross
checks referential integrity, and stores the bundle under a sha256 content
id, so identical bytes always map to the same dataset id.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .. import synth

REQUIRED_TABLES = ("hospitals.csv", "mobility.csv", "admissions.csv")
OPTIONAL_TABLES = ("patients.csv",)


class SchemaViolation(ValueError):
    """Dataset bundle fails validation; carries row/column diagnostics."""

    def __init__(self, message: str, details: Optional[dict] = None):
        super().__init__(message)
        self.details = details or {}


class DataRoot:
    def __init__(self, root):
        self.root = Path(root)
        (self.root / "datasets").mkdir(parents=True, exist_ok=True)
        (self.root / "models").mkdir(parents=True, exist_ok=True)

    def dataset_dir(self, dataset_id: str) -> Path:
        return self.root / "datasets" / dataset_id

    def model_dir(self, model_id: str, version: int) -> Path:
        return self.root / "models" / model_id / f"v{version}"

    @property
    def registry_path(self) -> Path:
        return self.root / "registry.json"

    def list_datasets(self) -> List[dict]:
        out = []
        for d in sorted((self.root / "datasets").iterdir()):
            manifest = d / "manifest.json"
            if manifest.exists():
                out.append(json.loads(manifest.read_text()))
        return out

    def ingest(self, tables: Dict[str, str]) -> dict:
        """Validate and store a bundle; returns the dataset manifest."""
        for name in REQUIRED_TABLES:
            if name not in tables:
                raise SchemaViolation(f"missing table {name}")
        unknown = set(tables) - set(REQUIRED_TABLES) - set(OPTIONAL_TABLES)
        if unknown:
            raise SchemaViolation(f"unexpected tables: {sorted(unknown)}")

        frames = {name: _parse_csv(name, text) for name, text in tables.items()}
        hospital_ids = _validate_hospitals(frames["hospitals.csv"])
        _validate_admissions(frames["admissions.csv"], hospital_ids)
        _validate_mobility(frames["mobility.csv"], hospital_ids)
        if "patients.csv" in frames:
            _validate_patients(frames["patients.csv"], hospital_ids)

        digest = hashlib.sha256()
        for name in sorted(tables):
            digest.update(name.encode("utf8"))
            digest.update(b"\x00")
            digest.update(tables[name].encode("utf8"))
        dataset_id = digest.hexdigest()[:16]

        target = self.dataset_dir(dataset_id)
        if not target.exists():
            target.mkdir(parents=True)
            for name, text in tables.items():
                (target / name).write_text(text)
            manifest = {
                "dataset_id": dataset_id,
                "tables": sorted(tables),
                "n_hospitals": len(hospital_ids),
                "n_days": int(frames["admissions.csv"]["day"].max()),
                "n_patients": int(len(frames["patients.csv"])) if "patients.csv" in frames else 0,
            }
            (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return json.loads((target / "manifest.json").read_text())

    def load_series(self, dataset_id: str):
        path = self.dataset_dir(dataset_id)
        if not path.exists():
            raise KeyError(f"unknown dataset {dataset_id}")
        return synth.load_hospital_series(path)

    def load_patients(self, dataset_id: str):
        path = self.dataset_dir(dataset_id)
        if not path.exists():
            raise KeyError(f"unknown dataset {dataset_id}")
        if not (path / "patients.csv").exists():
            raise SchemaViolation(f"dataset {dataset_id} has no patient table")
        return synth.load_patient_records(path)


def _parse_csv(name: str, text: str) -> pd.DataFrame:
    try:
        return pd.read_csv(io.StringIO(text))
    except Exception as exc:
        raise SchemaViolation(f"{name}: not parseable as CSV ({exc})")


def _require_columns(name: str, df: pd.DataFrame, columns):
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaViolation(f"{name}: missing columns {missing}")


def _validate_hospitals(df: pd.DataFrame):
    _require_columns("hospitals.csv", df, ["hospital_id", "region", "population"])
    if df["hospital_id"].duplicated().any():
        dupe = df.loc[df["hospital_id"].duplicated(), "hospital_id"].iloc[0]
        raise SchemaViolation(f"hospitals.csv: duplicate hospital_id {dupe!r}")
    bad = df.index[(df["population"] <= 0) | df["population"].isna()]
    if len(bad):
        raise SchemaViolation(
            "hospitals.csv: population must be positive",
            details={"row": int(bad[0]) + 2},
        )
    return set(df["hospital_id"].astype(str))


def _validate_admissions(df: pd.DataFrame, hospital_ids):
    _require_columns("admissions.csv", df, ["hospital_id", "day", "admissions"])
    bad = df.index[(df["admissions"] < 0) | df["admissions"].isna()]
    if len(bad):
        raise SchemaViolation(
            "admissions.csv: negative or missing count",
            details={"row": int(bad[0]) + 2, "column": "admissions"},
        )
    _check_refs("admissions.csv", df, hospital_ids)


def _validate_mobility(df: pd.DataFrame, hospital_ids):
    _require_columns("mobility.csv", df, ["hospital_id", "day"])
    mcols = [c for c in df.columns if c.startswith("m") and c[1:].isdigit()]
    if not mcols:
        raise SchemaViolation("mobility.csv: no mobility columns m1..mK")
    for col in mcols:
        bad = df.index[(df[col] < -1) | (df[col] > 1) | df[col].isna()]
        if len(bad):
            raise SchemaViolation(
                f"mobility.csv: {col} outside [-1, 1]",
                details={"row": int(bad[0]) + 2, "column": col},
            )
    _check_refs("mobility.csv", df, hospital_ids)


def _validate_patients(df: pd.DataFrame, hospital_ids):
    _require_columns(
        "patients.csv", df, ["patient_id", "hospital_id", "admission_day", "censor_day"]
    )
    if df["patient_id"].duplicated().any():
        dupe = df.loc[df["patient_id"].duplicated(), "patient_id"].iloc[0]
        raise SchemaViolation(f"patients.csv: duplicate patient_id {dupe!r}")
    bad = df.index[df["censor_day"] < 1]
    if len(bad):
        raise SchemaViolation(
            "patients.csv: censor_day must be >= 1", details={"row": int(bad[0]) + 2}
        )
    for outcome in synth.OUTCOMES:
        col = f"event_{outcome}"
        if col in df.columns:
            events = df[col]
            bad = df.index[events.notna() & (events > df["censor_day"])]
            if len(bad):
                raise SchemaViolation(
                    f"patients.csv: {col} after censor_day",
                    details={"row": int(bad[0]) + 2, "column": col},
                )
    _check_refs("patients.csv", df, hospital_ids)


def _check_refs(name: str, df: pd.DataFrame, hospital_ids):
    known = df["hospital_id"].astype(str).isin(hospital_ids)
    if not known.all():
        row = int(np.flatnonzero(~known.to_numpy())[0])
        missing = str(df["hospital_id"].iloc[row])
        raise SchemaViolation(
            f"{name}: unknown hospital_id {missing!r}",
            details={"row": row + 2, "hospital_id": missing},
        )
