"""Discrete-time hazard prediction over a 30-day post-admission horizon.

One calibrated binary classification pipeline per day-after-admission tau:
the training slice for day tau keeps every patient still observed and
event-free before tau and labels whether the event lands exactly on tau.
Pipelines run four stages in order: imputation, feature processing,
classification, calibration.  Days whose slice is too small or single-class
fall back to a constant predictor at the empirical event rate, with a flag.
"""

from __future__ import annotations

import json
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from sklearn.decomposition import PCA
from sklearn.ensemble import GradientBoostingClassifier, RandomForestClassifier
from sklearn.experimental import enable_iterative_imputer  # noqa: F401
from sklearn.feature_selection import RFE
from sklearn.impute import IterativeImputer, KNNImputer, SimpleImputer
from sklearn.isotonic import IsotonicRegression
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

__all__ = [
    "OUTCOMES",
    "PatientRecord",
    "FeatureSchema",
    "Slice",
    "PipelineConfig",
    "FittedPipeline",
    "HazardModel",
    "CvResult",
    "DegenerateSliceError",
    "UnknownOutcomeError",
    "SchemaMismatchError",
    "derive_slice",
    "fit_pipeline",
    "cross_validate",
    "train_hazard_model",
    "predict_hazard",
    "predict_hazard_matrix",
    "event_curve",
    "brier_score",
    "default_config",
    "save_hazard_model",
    "load_hazard_model",
    "IMPUTERS",
    "FEATURE_PROCESSORS",
    "CLASSIFIERS",
    "CALIBRATORS",
]

OUTCOMES = ("icu", "mortality", "discharge", "ventilation")
MISSING_LEVEL = "__missing__"
DEFAULT_HORIZON = 30
MIN_SLICE_ROWS = 20
ARTIFACT_SCHEMA_VERSION = 1


class DegenerateSliceError(ValueError):
    """Slice too small or single-class for pipeline fitting."""


class UnknownOutcomeError(KeyError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass
class PatientRecord:
    patient_id: str
    features: Dict[str, object]  # column -> float | str | None
    hospital_id: str
    admission_day: int
    outcomes: Dict[str, Optional[int]]  # outcome -> event day after admission
    censor_day: int

    def __post_init__(self):
        if self.censor_day < 1:
            raise ValueError(f"censor_day must be >= 1, got {self.censor_day}")
        for name, day in self.outcomes.items():
            if day is not None and day > self.censor_day:
                raise ValueError(
                    f"patient {self.patient_id}: {name} event on day {day} "
                    f"after censoring at {self.censor_day}"
                )


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout plus the one-hot encoding used by every pipeline stage.

    Categorical columns get an explicit missing level so only numeric cells
    carry NaN into the imputation stage.
    """

    numeric: tuple
    categorical: tuple  # ((name, (level, ...)), ...)

    @staticmethod
    def infer(records: Sequence[PatientRecord]) -> "FeatureSchema":
        if not records:
            raise ValueError("cannot infer a schema from zero records")
        columns = list(records[0].features)
        numeric, categorical = [], []
        for col in columns:
            levels = set()
            is_numeric = True
            for rec in records:
                v = rec.features.get(col)
                if v is None:
                    continue
                if isinstance(v, str):
                    is_numeric = False
                    levels.add(v)
                else:
                    levels.add(v)
            if is_numeric:
                numeric.append(col)
            else:
                categorical.append((col, tuple(sorted(str(x) for x in levels))))
        return FeatureSchema(numeric=tuple(numeric), categorical=tuple(categorical))

    @property
    def columns(self) -> tuple:
        return self.numeric + tuple(name for name, _ in self.categorical)

    def encoded_dim(self) -> int:
        return len(self.numeric) + sum(len(lv) + 1 for _, lv in self.categorical)

    def encode(self, rows: Sequence[Dict[str, object]]) -> np.ndarray:
        known = set(self.columns)
        x = np.zeros((len(rows), self.encoded_dim()))
        for i, row in enumerate(rows):
            extra = set(row) - known
            if extra:
                raise SchemaMismatchError(f"unknown feature columns: {sorted(extra)}")
            j = 0
            for col in self.numeric:
                v = row.get(col)
                if isinstance(v, str):
                    raise SchemaMismatchError(f"column {col} expects a number, got {v!r}")
                x[i, j] = np.nan if v is None else float(v)
                j += 1
            for col, levels in self.categorical:
                v = row.get(col)
                level = MISSING_LEVEL if v is None else str(v)
                if level != MISSING_LEVEL and level not in levels:
                    level = MISSING_LEVEL  # unseen level treated as missing
                block = np.zeros(len(levels) + 1)
                idx = levels.index(level) if level in levels else len(levels)
                block[idx] = 1.0
                x[i, j : j + len(levels) + 1] = block
                j += len(levels) + 1
        return x

    def encode_records(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return self.encode([r.features for r in records])


@dataclass
class Slice:
    records: List[PatientRecord]
    labels: np.ndarray
    outcome: str
    tau: int

    def __len__(self):
        return len(self.records)


def derive_slice(
    records: Sequence[PatientRecord], outcome: str, tau: int
) -> Slice:
    """Day-tau training slice: observed at tau, event-free before tau,
    labeled by whether the event lands exactly on tau."""
    if outcome not in OUTCOMES:
        raise UnknownOutcomeError(f"unknown outcome {outcome!r}")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    kept, labels = [], []
    for rec in records:
        event = rec.outcomes.get(outcome)
        if rec.censor_day < tau:
            continue
        if event is not None and event < tau:
            continue
        kept.append(rec)
        labels.append(1 if event == tau else 0)
    return Slice(records=kept, labels=np.asarray(labels, dtype=int), outcome=outcome, tau=tau)


# ---------------------------------------------------------------------------
# Stage registry
# ---------------------------------------------------------------------------
#
# Each entry: builder(params, seed) -> estimator, plus declared hyperparameter
# bounds as name -> (low, high, kind) with kind in {"float", "int", "logfloat"}.


def _build_median(params, seed):
    return SimpleImputer(strategy="median", keep_empty_features=True)


def _build_iterative(params, seed):
    return IterativeImputer(
        max_iter=int(params.get("max_iter", 8)),
        random_state=seed,
        keep_empty_features=True,
    )


def _build_knn(params, seed):
    return KNNImputer(n_neighbors=int(params.get("n_neighbors", 5)))


class _Identity:
    def fit(self, x, y=None):
        return self

    def fit_transform(self, x, y=None):
        return x

    def transform(self, x):
        return x


def _build_identity(params, seed):
    return _Identity()


def _build_pca(params, seed):
    return PCA(n_components=float(params.get("var_keep", 0.9)), random_state=seed)


def _build_rfe(params, seed):
    frac = float(params.get("keep_frac", 0.6))
    return RFE(
        estimator=LogisticRegression(max_iter=500, random_state=seed),
        n_features_to_select=max(min(frac, 1.0), 0.05),
        step=0.2,
    )


def _build_elasticnet(params, seed):
    return make_pipeline(
        StandardScaler(),
        LogisticRegression(
            penalty="elasticnet",
            solver="saga",
            C=float(params.get("C", 1.0)),
            l1_ratio=float(params.get("l1_ratio", 0.5)),
            max_iter=2000,
            random_state=seed,
        ),
    )


def _build_random_forest(params, seed):
    return RandomForestClassifier(
        n_estimators=int(params.get("n_estimators", 200)),
        max_depth=int(params.get("max_depth", 8)),
        min_samples_leaf=int(params.get("min_samples_leaf", 3)),
        random_state=seed,
        n_jobs=1,
    )


def _build_gbt(params, seed):
    return GradientBoostingClassifier(
        n_estimators=int(params.get("n_estimators", 150)),
        learning_rate=float(params.get("learning_rate", 0.08)),
        max_depth=int(params.get("max_depth", 3)),
        random_state=seed,
    )


IMPUTERS = {
    "median": (_build_median, {}),
    "iterative": (_build_iterative, {"max_iter": (3, 15, "int")}),
    "knn": (_build_knn, {"n_neighbors": (2, 15, "int")}),
}
FEATURE_PROCESSORS = {
    "none": (_build_identity, {}),
    "pca": (_build_pca, {"var_keep": (0.5, 0.99, "float")}),
    "rfe": (_build_rfe, {"keep_frac": (0.3, 0.9, "float")}),
}
CLASSIFIERS = {
    "elasticnet": (
        _build_elasticnet,
        {"C": (1e-2, 1e2, "logfloat"), "l1_ratio": (0.0, 1.0, "float")},
    ),
    "random_forest": (
        _build_random_forest,
        {
            "n_estimators": (50, 300, "int"),
            "max_depth": (2, 12, "int"),
            "min_samples_leaf": (1, 20, "int"),
        },
    ),
    "gbt": (
        _build_gbt,
        {
            "n_estimators": (50, 300, "int"),
            "learning_rate": (0.01, 0.3, "logfloat"),
            "max_depth": (2, 6, "int"),
        },
    ),
}
CALIBRATORS = ("none", "sigmoid", "isotonic")

_STAGE_REGISTRIES = {
    "imputer": IMPUTERS,
    "feature_processor": FEATURE_PROCESSORS,
    "classifier": CLASSIFIERS,
}


def register_classifier(name: str, builder, bounds: Optional[dict] = None) -> None:
    """Extend the classifier stage (used for stubs and experiments)."""
    CLASSIFIERS[name] = (builder, bounds or {})


# Canonical reduced registry exposed to the configuration search; stubs
# registered at runtime are deliberately excluded.
REDUCED_REGISTRY_NAMES = {
    "imputer": ("median", "iterative", "knn"),
    "feature_processor": ("none", "pca", "rfe"),
    "classifier": ("elasticnet", "random_forest", "gbt"),
    "calibrator": CALIBRATORS,
}


def reduced_search_space():
    """The implemented stage registry as a configuration-search space."""
    from .search import SearchSpace, StageChoice

    stages = {}
    for stage in ("imputer", "feature_processor", "classifier"):
        registry = _STAGE_REGISTRIES[stage]
        stages[stage] = [
            StageChoice.from_bounds(name, registry[name][1])
            for name in REDUCED_REGISTRY_NAMES[stage]
        ]
    stages["calibrator"] = [StageChoice(name) for name in REDUCED_REGISTRY_NAMES["calibrator"]]
    return SearchSpace.from_dict(stages)


def pipeline_config_from_search(config: dict) -> PipelineConfig:
    """Convert a search-space configuration into a PipelineConfig."""
    return PipelineConfig(
        imputer=config["imputer"]["choice"],
        imputer_params=dict(config["imputer"].get("params", {})),
        feature_processor=config["feature_processor"]["choice"],
        feature_params=dict(config["feature_processor"].get("params", {})),
        classifier=config["classifier"]["choice"],
        classifier_params=dict(config["classifier"].get("params", {})),
        calibrator=config["calibrator"]["choice"],
    )


@dataclass(frozen=True)
class PipelineConfig:
    imputer: str = "median"
    imputer_params: dict = field(default_factory=dict)
    feature_processor: str = "none"
    feature_params: dict = field(default_factory=dict)
    classifier: str = "gbt"
    classifier_params: dict = field(default_factory=dict)
    calibrator: str = "isotonic"

    def __post_init__(self):
        for stage, choice, params in (
            ("imputer", self.imputer, self.imputer_params),
            ("feature_processor", self.feature_processor, self.feature_params),
            ("classifier", self.classifier, self.classifier_params),
        ):
            registry = _STAGE_REGISTRIES[stage]
            if choice not in registry:
                raise ValueError(f"unknown {stage} {choice!r}")
            bounds = registry[choice][1]
            for name, value in params.items():
                if name not in bounds:
                    raise ValueError(f"{stage} {choice!r} has no hyperparameter {name!r}")
                lo, hi, _kind = bounds[name]
                if not (lo <= value <= hi):
                    raise ValueError(
                        f"{stage}.{name}={value} outside declared bounds [{lo}, {hi}]"
                    )
        if self.calibrator not in CALIBRATORS:
            raise ValueError(f"unknown calibrator {self.calibrator!r}")

    def to_dict(self) -> dict:
        return {
            "imputer": self.imputer,
            "imputer_params": dict(self.imputer_params),
            "feature_processor": self.feature_processor,
            "feature_params": dict(self.feature_params),
            "classifier": self.classifier,
            "classifier_params": dict(self.classifier_params),
            "calibrator": self.calibrator,
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        return PipelineConfig(**d)


def default_config() -> PipelineConfig:
    return PipelineConfig()


# ---------------------------------------------------------------------------
# Calibrators: monotone nondecreasing transforms of the raw score.
# ---------------------------------------------------------------------------


class SigmoidCalibrator:
    """Platt-style fit p = sigmoid(a*s + b) with a >= 0 enforced, so the
    transform can never invert the score ordering."""

    def __init__(self):
        self.a_ = 1.0
        self.b_ = 0.0

    def fit(self, scores, labels):
        s = np.asarray(scores, dtype=float)
        y = np.asarray(labels, dtype=float)

        def nll(theta):
            a = np.logaddexp(0.0, theta[0])  # softplus keeps slope nonnegative
            z = np.clip(a * s + theta[1], -35, 35)
            p = 1.0 / (1.0 + np.exp(-z))
            p = np.clip(p, 1e-12, 1 - 1e-12)
            return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))

        # start at slope 1: softplus^-1(1) ~= 0.5413
        res = minimize(nll, np.array([0.5413248546, 0.0]), method="Nelder-Mead")
        self.a_ = float(np.logaddexp(0.0, res.x[0]))
        self.b_ = float(res.x[1])
        return self

    def transform(self, scores):
        z = np.clip(self.a_ * np.asarray(scores, dtype=float) + self.b_, -35, 35)
        return 1.0 / (1.0 + np.exp(-z))


class IsotonicCalibrator:
    """Isotonic regression blended with a vanishing strictly increasing term
    so equal-score plateaus cannot create new rank ties."""

    _BLEND = 1e-9

    def __init__(self):
        self.iso_ = None
        self.center_ = 0.0
        self.scale_ = 1.0

    def fit(self, scores, labels):
        s = np.asarray(scores, dtype=float)
        self.iso_ = IsotonicRegression(
            y_min=0.0, y_max=1.0, increasing=True, out_of_bounds="clip"
        ).fit(s, np.asarray(labels, dtype=float))
        self.center_ = float(np.median(s))
        self.scale_ = float(max(np.std(s), 1e-6))
        return self

    def transform(self, scores):
        s = np.asarray(scores, dtype=float)
        base = self.iso_.predict(s)
        tiebreak = 1.0 / (1.0 + np.exp(-(s - self.center_) / self.scale_))
        return (1.0 - self._BLEND) * base + self._BLEND * tiebreak


class _NoCalibration:
    def fit(self, scores, labels):
        return self

    def transform(self, scores):
        return np.asarray(scores, dtype=float)


def _make_calibrator(name: str):
    return {"none": _NoCalibration, "sigmoid": SigmoidCalibrator, "isotonic": IsotonicCalibrator}[
        name
    ]()


# ---------------------------------------------------------------------------
# Fitting and prediction
# ---------------------------------------------------------------------------


@dataclass
class FittedPipeline:
    config: PipelineConfig
    schema: FeatureSchema
    imputer: object
    feature_processor: object
    classifier: object
    calibrator: object
    calibration_skipped: bool = False

    def raw_scores(self, x: np.ndarray) -> np.ndarray:
        z = self.imputer.transform(x)
        z = self.feature_processor.transform(z)
        return self.classifier.predict_proba(z)[:, 1]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.calibrator.transform(self.raw_scores(x)), 0.0, 1.0)


def fit_pipeline(
    config: PipelineConfig,
    slice_: Slice,
    schema: Optional[FeatureSchema] = None,
    seed: int = 0,
    min_rows: int = MIN_SLICE_ROWS,
) -> FittedPipeline:
    """Fit the four stages in order on one day slice."""
    y = slice_.labels
    if len(slice_) < min_rows:
        raise DegenerateSliceError(
            f"slice for {slice_.outcome} tau={slice_.tau} has {len(slice_)} rows"
        )
    if len(np.unique(y)) < 2:
        raise DegenerateSliceError(
            f"slice for {slice_.outcome} tau={slice_.tau} is single-class"
        )
    schema = schema or FeatureSchema.infer(slice_.records)
    x = schema.encode_records(slice_.records)

    if config.calibrator != "none" and y.sum() >= 4 and (1 - y).sum() >= 4:
        x_fit, x_cal, y_fit, y_cal = train_test_split(
            x, y, test_size=0.25, stratify=y, random_state=seed
        )
    else:
        x_fit, y_fit = x, y
        x_cal = y_cal = None

    imputer = _STAGE_REGISTRIES["imputer"][config.imputer][0](config.imputer_params, seed)
    feature = _STAGE_REGISTRIES["feature_processor"][config.feature_processor][0](
        config.feature_params, seed
    )
    classifier = _STAGE_REGISTRIES["classifier"][config.classifier][0](
        config.classifier_params, seed
    )

    z = imputer.fit_transform(x_fit)
    z = feature.fit_transform(z, y_fit)
    classifier.fit(z, y_fit)

    fitted = FittedPipeline(
        config=config,
        schema=schema,
        imputer=imputer,
        feature_processor=feature,
        classifier=classifier,
        calibrator=_NoCalibration(),
    )
    if config.calibrator != "none":
        if x_cal is not None and len(np.unique(y_cal)) == 2:
            cal = _make_calibrator(config.calibrator)
            cal.fit(fitted.raw_scores(x_cal), y_cal)
            fitted.calibrator = cal
        else:
            fitted.calibration_skipped = True
    return fitted


class ConstantHazard:
    """Fallback predictor at the empirical event rate of a degenerate slice."""

    def __init__(self, rate: float, schema: FeatureSchema):
        self.rate = float(min(max(rate, 0.0), 1.0))
        self.schema = schema

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return np.full(len(x), self.rate)


@dataclass
class HazardModel:
    outcome: str
    horizon: int
    schema: FeatureSchema
    per_day: list  # FittedPipeline | ConstantHazard, index tau-1
    fallback_days: list  # taus that used the constant fallback

    def __post_init__(self):
        if len(self.per_day) != self.horizon:
            raise ValueError("per_day must hold exactly horizon predictors")


def train_hazard_model(
    records: Sequence[PatientRecord],
    outcome: str,
    config: Optional[PipelineConfig] = None,
    horizon: int = DEFAULT_HORIZON,
    seed: int = 0,
) -> HazardModel:
    """One pipeline per day tau in (0, horizon]; degenerate days fall back
    to the slice's empirical event rate."""
    config = config or default_config()
    schema = FeatureSchema.infer(records)
    per_day, fallback_days = [], []
    for tau in range(1, horizon + 1):
        slc = derive_slice(records, outcome, tau)
        try:
            per_day.append(fit_pipeline(config, slc, schema=schema, seed=seed + tau))
        except DegenerateSliceError:
            rate = float(slc.labels.mean()) if len(slc) else 0.0
            per_day.append(ConstantHazard(rate, schema))
            fallback_days.append(tau)
    return HazardModel(
        outcome=outcome,
        horizon=horizon,
        schema=schema,
        per_day=per_day,
        fallback_days=fallback_days,
    )


def predict_hazard(model: HazardModel, features: Dict[str, object]) -> np.ndarray:
    """Per-day hazard vector h[1..H] for one feature mapping."""
    return predict_hazard_matrix(model, [features])[0]


def predict_hazard_matrix(
    model: HazardModel, rows: Sequence[Dict[str, object]]
) -> np.ndarray:
    x = model.schema.encode(rows)
    out = np.empty((len(rows), model.horizon))
    for tau_idx, predictor in enumerate(model.per_day):
        out[:, tau_idx] = predictor.predict_proba(x)
    return np.clip(out, 0.0, 1.0)


def event_curve(hazards: np.ndarray) -> np.ndarray:
    """Cumulative event probability F(d) = 1 - prod_{tau<=d} (1 - h(tau))."""
    h = np.asarray(hazards, dtype=float)
    if np.any(h < 0) or np.any(h > 1):
        raise ValueError("hazards must lie in [0, 1]")
    return 1.0 - np.cumprod(1.0 - h, axis=-1)


def brier_score(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(np.mean((p - y) ** 2))


@dataclass
class CvResult:
    mean_loss: float
    fold_losses: List[float]
    skipped_folds: int


def cross_validate(
    config: PipelineConfig,
    records: Sequence[PatientRecord],
    outcome: str,
    tau: int,
    folds: int = 5,
    seed: int = 0,
    schema: Optional[FeatureSchema] = None,
    min_rows: int = MIN_SLICE_ROWS,
) -> CvResult:
    """Mean held-out Brier score over stratified folds of the day-tau slice."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    slc = derive_slice(records, outcome, tau)
    if len(slc) < folds or len(np.unique(slc.labels)) < 2:
        raise DegenerateSliceError(f"slice cannot support {folds}-fold CV")
    schema = schema or FeatureSchema.infer(slc.records)
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    records_arr = np.array(slc.records, dtype=object)
    losses, skipped = [], 0
    for train_idx, val_idx in splitter.split(np.zeros(len(slc)), slc.labels):
        train_slice = Slice(
            records=list(records_arr[train_idx]),
            labels=slc.labels[train_idx],
            outcome=outcome,
            tau=tau,
        )
        try:
            fitted = fit_pipeline(
                config, train_slice, schema=schema, seed=seed, min_rows=min_rows
            )
        except DegenerateSliceError:
            skipped += 1
            continue
        x_val = schema.encode_records(list(records_arr[val_idx]))
        losses.append(brier_score(fitted.predict_proba(x_val), slc.labels[val_idx]))
    if not losses:
        raise DegenerateSliceError("every fold was degenerate")
    return CvResult(mean_loss=float(np.mean(losses)), fold_losses=losses, skipped_folds=skipped)


# ---------------------------------------------------------------------------
# Artifact serialization
# ---------------------------------------------------------------------------


def save_hazard_model(models: Dict[str, HazardModel], directory) -> None:
    """Persist a per-outcome bundle: manifest plus pickled predictors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "kind": "hazard",
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outcomes": sorted(models),
        "horizons": {k: m.horizon for k, m in models.items()},
        "fallback_days": {k: m.fallback_days for k, m in models.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with open(directory / "models.pkl", "wb") as fh:
        pickle.dump(models, fh)


def load_hazard_model(directory) -> Dict[str, HazardModel]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["schema_version"] != ARTIFACT_SCHEMA_VERSION:
        raise ValueError(f"unsupported artifact schema {manifest['schema_version']}")
    with open(directory / "models.pkl", "rb") as fh:
        return pickle.load(fh)
