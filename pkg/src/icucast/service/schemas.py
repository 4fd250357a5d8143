"""Pydantic request/response models for the wire contract.

Every response document carries a schema_version; errors use a uniform
{code, message, details} envelope.
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

WIRE_SCHEMA_VERSION = 1


class HealthResponse(BaseModel):
    status: str = "ok"


class DatasetUpload(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    hospitals_csv: str
    mobility_csv: str
    admissions_csv: str
    patients_csv: Optional[str] = None


class DatasetResponse(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    dataset_id: str
    n_hospitals: int
    n_days: int
    n_patients: int


class TrainRequest(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    dataset_id: str
    kind: Literal["trend", "hazard"]
    model_id: Optional[str] = None  # defaults to the kind
    config: Optional[dict] = None
    search_budget: Optional[int] = Field(default=None, ge=1)


class RegistryEntryDoc(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    model_id: str
    kind: str
    version: int
    created_at: str
    status: str
    dataset_id: str
    held_out_metrics: dict


class MetricsHistoryDoc(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    model_id: str
    history: List[dict]


class ScopeModel(BaseModel):
    resolution: Literal["hospital", "region", "national"]
    target_id: str = ""


class ForecastRequest(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    model_id: str = "trend"
    scope: ScopeModel
    horizon: int = Field(default=30, ge=0, le=120)
    mobility_mode: Literal["constant", "user"] = "constant"
    mobility_series: Optional[List[List[float]]] = None
    mc_samples: int = Field(default=200, ge=1, le=5000)
    seed: int = 0


class ForecastDocument(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    model_id: str
    model_version: int
    scope: ScopeModel
    start_day: int
    horizon: int
    mean: List[float]
    q05: List[float]
    q25: List[float]
    q50: List[float]
    q75: List[float]
    q95: List[float]


class SimulateRequest(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    trend_model_id: str = "trend"
    hazard_model_id: str = "hazard"
    dataset_id: Optional[str] = None  # cohort source; defaults to hazard training set
    scope: ScopeModel
    horizon: int = Field(default=30, ge=1, le=120)
    mobility_mode: Literal["constant", "user"] = "constant"
    mobility_series: Optional[List[List[float]]] = None
    repetitions: int = Field(default=100, ge=1, le=5000)
    seed: int = 0


class CounterSummary(BaseModel):
    mean: List[float]
    q05: List[float]
    q50: List[float]
    q95: List[float]


class SimulateDocument(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    scope: ScopeModel
    horizon: int
    repetitions: int
    seed: int
    summary: Dict[str, CounterSummary]
    admission_forecast: ForecastDocument
    risk_profiles: Dict[str, List[float]]  # per-outcome mean hazard curves


class FeatureHistogram(BaseModel):
    kind: Literal["numeric", "categorical"]
    missing: int
    bin_edges: Optional[List[float]] = None
    counts: List[float]
    levels: Optional[List[str]] = None


class CohortPreflightRequest(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    dataset_id: Optional[str] = None
    hazard_model_id: str = "hazard"
    scope: ScopeModel


class CohortPreflightDocument(BaseModel):
    schema_version: int = WIRE_SCHEMA_VERSION
    scope: ScopeModel
    n_patients: int
    features: Dict[str, FeatureHistogram]


class ErrorEnvelope(BaseModel):
    code: str
    message: str
    details: dict = Field(default_factory=dict)
