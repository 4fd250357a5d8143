"""FastAPI application wrapping the forecasting and simulation engine."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .. import hazard, sim, trend
from .config import ServiceConfig, resolve_data_root
from .registry import ModelRegistry
from .schemas import (
    CohortPreflightDocument,
    CohortPreflightRequest,
    DatasetResponse,
    DatasetUpload,
    ErrorEnvelope,
    FeatureHistogram,
    ForecastDocument,
    ForecastRequest,
    HealthResponse,
    MetricsHistoryDoc,
    RegistryEntryDoc,
    ScopeModel,
    SimulateDocument,
    SimulateRequest,
    TrainRequest,
    WIRE_SCHEMA_VERSION,
)
from .storage import DataRoot, SchemaViolation
from .training import train_hazard_bundle, train_trend_model


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, details: Optional[dict] = None):
        self.status = status
        self.code = code
        self.message = message
        self.details = details or {}


def _not_found(kind: str, name: str) -> ApiError:
    return ApiError(404, f"{kind}_not_found", f"unknown {kind} {name!r}")


class EngineState:
    """Loaded artifacts and scope resolution for one data root."""

    def __init__(self, root: DataRoot, config: ServiceConfig):
        self.root = root
        self.config = config
        self.registry = ModelRegistry(root)
        self._trend_cache: Dict[str, trend.TrendModel] = {}
        self._hazard_cache: Dict[str, Dict[str, hazard.HazardModel]] = {}

    def active_entry(self, model_id: str, kind: str):
        entry = self.registry.active(model_id)
        if entry is None or entry.kind != kind:
            raise _not_found("model", model_id)
        return entry

    def trend_model(self, model_id: str):
        entry = self.active_entry(model_id, "trend")
        key = f"{model_id}@{entry.version}"
        if key not in self._trend_cache:
            self._trend_cache[key] = trend.load_model(entry.artifact_path)
        return entry, self._trend_cache[key]

    def hazard_bundle(self, model_id: str):
        entry = self.active_entry(model_id, "hazard")
        key = f"{model_id}@{entry.version}"
        if key not in self._hazard_cache:
            self._hazard_cache[key] = hazard.load_hazard_model(entry.artifact_path)
        return entry, self._hazard_cache[key]

    def resolve_scope(self, scope: ScopeModel, dataset_id: str) -> List[str]:
        import pandas as pd

        path = self.root.dataset_dir(dataset_id) / "hospitals.csv"
        if not path.exists():
            raise _not_found("dataset", dataset_id)
        table = pd.read_csv(path)
        ids = table["hospital_id"].astype(str).tolist()
        if scope.resolution == "national":
            return ids
        if scope.resolution == "region":
            regions = table["region"].astype(str).tolist()
            matched = [h for h, r in zip(ids, regions) if r == scope.target_id]
            if not matched:
                raise _not_found("region", scope.target_id)
            return matched
        if scope.target_id not in ids:
            raise _not_found("hospital", scope.target_id)
        return [scope.target_id]


def create_app(
    data_root=None,
    config: Optional[ServiceConfig] = None,
    frontend_dist: Optional[str] = None,
) -> FastAPI:
    root = DataRoot(resolve_data_root(data_root))
    state = EngineState(root, config or ServiceConfig())
    app = FastAPI(title="icucast", version="0.1.0")
    app.state.engine = state

    @app.exception_handler(ApiError)
    async def api_error_handler(request: Request, exc: ApiError):
        envelope = ErrorEnvelope(code=exc.code, message=exc.message, details=exc.details)
        return JSONResponse(status_code=exc.status, content=envelope.model_dump())

    @app.exception_handler(SchemaViolation)
    async def schema_violation_handler(request: Request, exc: SchemaViolation):
        envelope = ErrorEnvelope(
            code="schema_violation", message=str(exc), details=exc.details
        )
        return JSONResponse(status_code=422, content=envelope.model_dump())

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        from fastapi.encoders import jsonable_encoder

        envelope = ErrorEnvelope(
            code="invalid_request",
            message="request body failed validation",
            details={"errors": jsonable_encoder(exc.errors())},
        )
        return JSONResponse(status_code=422, content=envelope.model_dump())

    @app.exception_handler(Exception)
    async def fallback_handler(request: Request, exc: Exception):
        envelope = ErrorEnvelope(code="internal_error", message=str(exc))
        return JSONResponse(status_code=500, content=envelope.model_dump())

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse()

    @app.post("/datasets", response_model=DatasetResponse)
    def ingest_dataset(upload: DatasetUpload):
        tables = {
            "hospitals.csv": upload.hospitals_csv,
            "mobility.csv": upload.mobility_csv,
            "admissions.csv": upload.admissions_csv,
        }
        if upload.patients_csv is not None:
            tables["patients.csv"] = upload.patients_csv
        manifest = root.ingest(tables)
        return DatasetResponse(**manifest)

    @app.get("/datasets")
    def list_datasets():
        return {"schema_version": WIRE_SCHEMA_VERSION, "datasets": root.list_datasets()}

    @app.post("/train", response_model=RegistryEntryDoc)
    def train(request: TrainRequest):
        if not root.dataset_dir(request.dataset_id).exists():
            raise _not_found("dataset", request.dataset_id)
        model_id = request.model_id or request.kind

        if request.kind == "trend":
            def build(artifact_dir):
                return train_trend_model(
                    root, request.dataset_id, artifact_dir, state.config,
                    overrides=request.config,
                )
        else:
            def build(artifact_dir):
                return train_hazard_bundle(
                    root, request.dataset_id, artifact_dir, state.config,
                    overrides=request.config,
                    search_budget=request.search_budget or state.config.search_budget,
                )

        try:
            entry = state.registry.train_version(
                model_id, request.kind, request.dataset_id, build
            )
        except (SchemaViolation, ApiError):
            raise
        except Exception as exc:
            raise ApiError(500, "training_failed", str(exc))
        return RegistryEntryDoc(
            model_id=entry.model_id,
            kind=entry.kind,
            version=entry.version,
            created_at=entry.created_at,
            status=entry.status,
            dataset_id=entry.dataset_id,
            held_out_metrics=entry.held_out_metrics,
        )

    @app.get("/models")
    def list_models():
        return {
            "schema_version": WIRE_SCHEMA_VERSION,
            "models": [e.to_dict() for e in state.registry.entries()],
        }

    @app.get("/models/{model_id}/metrics", response_model=MetricsHistoryDoc)
    def model_metrics(model_id: str):
        history = state.registry.history(model_id)
        if not history:
            raise _not_found("model", model_id)
        return MetricsHistoryDoc(model_id=model_id, history=history)

    @app.post("/forecast", response_model=ForecastDocument)
    def forecast_endpoint(request: ForecastRequest):
        entry, model = state.trend_model(request.model_id)
        hospital_ids = state.resolve_scope(request.scope, entry.dataset_id)
        missing = [h for h in hospital_ids if h not in model.hospitals]
        if missing:
            raise ApiError(
                422, "hospital_not_in_model",
                f"model {request.model_id!r} does not cover {missing[:3]}",
            )
        user_series = None
        if request.mobility_mode == "user":
            if request.mobility_series is None:
                raise ApiError(422, "missing_mobility", "user mode requires mobility_series")
            user_series = np.asarray(request.mobility_series, dtype=float)
            if user_series.ndim != 2 or user_series.shape[0] < request.horizon:
                raise ApiError(
                    422, "bad_mobility",
                    f"mobility series must be at least {request.horizon} days",
                )
        parts = []
        for hid in sorted(hospital_ids):
            mobility = (
                user_series[: request.horizon]
                if user_series is not None
                else model.constant_mobility(hid, request.horizon)
            )
            parts.append(
                trend.forecast(
                    model, hid, mobility,
                    mc_samples=request.mc_samples, seed=request.seed,
                )
            )
        combined = trend.aggregate(parts) if len(parts) > 1 else parts[0]
        doc = combined.to_document()
        return ForecastDocument(
            model_id=request.model_id,
            model_version=entry.version,
            scope=request.scope,
            **doc,
        )

    @app.post("/simulate", response_model=SimulateDocument)
    def simulate_endpoint(request: SimulateRequest):
        trend_entry, trend_model = state.trend_model(request.trend_model_id)
        hazard_entry, bundle = state.hazard_bundle(request.hazard_model_id)
        dataset_id = request.dataset_id or hazard_entry.dataset_id
        hospital_ids = state.resolve_scope(request.scope, dataset_id)
        missing = [h for h in hospital_ids if h not in trend_model.hospitals]
        if missing:
            raise ApiError(
                422, "hospital_not_in_model",
                f"trend model does not cover {missing[:3]}",
            )
        patients = root.load_patients(dataset_id)
        try:
            cohort = sim.empirical_distribution(patients, hospital_ids)
        except ValueError as exc:
            raise ApiError(422, "empty_cohort", str(exc))
        mobility_series = (
            np.asarray(request.mobility_series, dtype=float)
            if request.mobility_series is not None
            else None
        )
        try:
            spec = sim.ScenarioSpec(
                resolution=request.scope.resolution,
                target_id=request.scope.target_id,
                hospital_ids=hospital_ids,
                horizon=request.horizon,
                mobility_mode=request.mobility_mode,
                mobility_series=mobility_series,
                repetitions=request.repetitions,
                seed=request.seed,
            )
        except ValueError as exc:
            raise ApiError(422, "bad_scenario", str(exc))
        demand = sim.simulate(spec, trend_model, bundle, cohort)

        # Intermediate panels: the driving admission forecast and the cohort's
        # average hazard profiles.
        parts = []
        for hid in sorted(hospital_ids):
            mobility = (
                mobility_series[: request.horizon]
                if mobility_series is not None
                else trend_model.constant_mobility(hid, request.horizon)
            )
            parts.append(
                trend.forecast(
                    trend_model, hid, mobility,
                    mc_samples=request.repetitions, seed=request.seed,
                )
            )
        admission_fc = trend.aggregate(parts) if len(parts) > 1 else parts[0]
        risk_profiles = {
            outcome: hazard.predict_hazard_matrix(model, cohort.rows).mean(axis=0).tolist()
            for outcome, model in bundle.items()
        }
        return SimulateDocument(
            scope=request.scope,
            horizon=demand.horizon,
            repetitions=demand.repetitions,
            seed=request.seed,
            summary=demand.summary,
            admission_forecast=ForecastDocument(
                model_id=request.trend_model_id,
                model_version=trend_entry.version,
                scope=request.scope,
                **admission_fc.to_document(),
            ),
            risk_profiles=risk_profiles,
        )

    @app.post("/simulate/preflight", response_model=CohortPreflightDocument)
    def simulate_preflight(request: CohortPreflightRequest):
        dataset_id = request.dataset_id
        if dataset_id is None:
            hazard_entry = state.registry.active(request.hazard_model_id)
            if hazard_entry is None:
                raise _not_found("model", request.hazard_model_id)
            dataset_id = hazard_entry.dataset_id
        hospital_ids = state.resolve_scope(request.scope, dataset_id)
        patients = root.load_patients(dataset_id)
        rows = [p.features for p in patients if p.hospital_id in set(hospital_ids)]
        if not rows:
            raise ApiError(422, "empty_cohort", "no patients in the requested scope")
        return CohortPreflightDocument(
            scope=request.scope,
            n_patients=len(rows),
            features=_feature_histograms(rows),
        )

    dist = Path(frontend_dist) if frontend_dist else None
    if dist and dist.exists():
        app.mount("/ui", StaticFiles(directory=dist, html=True), name="ui")

    return app


def _feature_histograms(rows: List[dict], bins: int = 10) -> Dict[str, FeatureHistogram]:
    out: Dict[str, FeatureHistogram] = {}
    columns = list(rows[0])
    for col in columns:
        values = [r.get(col) for r in rows]
        present = [v for v in values if v is not None]
        missing = len(values) - len(present)
        if present and all(isinstance(v, str) for v in present):
            levels = sorted(set(present))
            counts = [float(sum(v == lv for v in present)) for lv in levels]
            out[col] = FeatureHistogram(
                kind="categorical", missing=missing, counts=counts, levels=levels
            )
        else:
            arr = np.asarray([float(v) for v in present], dtype=float)
            if arr.size == 0:
                out[col] = FeatureHistogram(kind="numeric", missing=missing, counts=[])
                continue
            counts, edges = np.histogram(arr, bins=bins)
            out[col] = FeatureHistogram(
                kind="numeric",
                missing=missing,
                bin_edges=[float(e) for e in edges],
                counts=[float(c) for c in counts],
            )
    return out
