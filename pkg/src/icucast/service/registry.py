"""Versioned model registry with archival and per-model metrics history.

Backed by a single JSON file under the data root.  Every (model_id, kind)
has at most one active version; retraining writes the new artifact first,
then atomically activates it and archives the predecessor.  Failed training
attempts land in the metrics history but never touch the active version.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .storage import DataRoot


@dataclass
class RegistryEntry:
    model_id: str
    kind: str  # trend | hazard
    version: int
    created_at: str
    artifact_path: str
    held_out_metrics: dict
    status: str  # active | archived
    dataset_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class ModelRegistry:
    def __init__(self, root: DataRoot):
        self.root = root
        self._io_lock = threading.Lock()
        self._model_locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _model_lock(self, model_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._model_locks.setdefault(model_id, threading.Lock())

    def _load(self) -> dict:
        path = self.root.registry_path
        if not path.exists():
            return {"entries": [], "history": []}
        return json.loads(path.read_text())

    def _store(self, state: dict) -> None:
        path = self.root.registry_path
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
        os.replace(tmp, path)

    def entries(self) -> List[RegistryEntry]:
        with self._io_lock:
            state = self._load()
        return [RegistryEntry(**e) for e in state["entries"]]

    def history(self, model_id: str) -> List[dict]:
        with self._io_lock:
            state = self._load()
        return [h for h in state["history"] if h["model_id"] == model_id]

    def active(self, model_id: str) -> Optional[RegistryEntry]:
        for entry in self.entries():
            if entry.model_id == model_id and entry.status == "active":
                return entry
        return None

    def train_version(
        self,
        model_id: str,
        kind: str,
        dataset_id: str,
        build: Callable[[Path], dict],
    ) -> RegistryEntry:
        """Run `build(artifact_dir) -> metrics` and activate the result.

        Training per model_id is serialized on a lock; reads stay available.
        On failure the previous active version is untouched and the attempt
        is recorded in the history.
        """
        with self._model_lock(model_id):
            with self._io_lock:
                state = self._load()
                versions = [
                    e["version"] for e in state["entries"] if e["model_id"] == model_id
                ]
                version = max(versions, default=0) + 1
            artifact_dir = self.root.model_dir(model_id, version)
            stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            try:
                metrics = build(artifact_dir)
            except Exception as exc:
                with self._io_lock:
                    state = self._load()
                    state["history"].append(
                        {
                            "model_id": model_id,
                            "version": version,
                            "timestamp": stamp,
                            "status": "failed",
                            "error": str(exc),
                        }
                    )
                    self._store(state)
                raise

            entry = RegistryEntry(
                model_id=model_id,
                kind=kind,
                version=version,
                created_at=stamp,
                artifact_path=str(artifact_dir),
                held_out_metrics=metrics,
                status="active",
                dataset_id=dataset_id,
            )
            with self._io_lock:
                state = self._load()
                for existing in state["entries"]:
                    if existing["model_id"] == model_id and existing["status"] == "active":
                        existing["status"] = "archived"
                state["entries"].append(entry.to_dict())
                state["history"].append(
                    {
                        "model_id": model_id,
                        "version": version,
                        "timestamp": stamp,
                        "status": "ok",
                        "metrics": metrics,
                    }
                )
                self._store(state)
            return entry

    def entry_for_version(self, model_id: str, version: int) -> Optional[RegistryEntry]:
        for entry in self.entries():
            if entry.model_id == model_id and entry.version == version:
                return entry
        return None
