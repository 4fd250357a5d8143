"""Agent-based scenario simulation of ICU demand.

Per Monte Carlo repetition: draw one admission trajectory per in-scope
hospital from the trend forecaster, give each arriving patient features
resampled uniformly from the regional cohort, and roll per-day Bernoulli
trials against the per-patient hazard curves.  The first ICU success sets
the inflow day and ends that patient's ICU loop; mortality and discharge
hazards then run from the ICU entry day, with the earlier event counting as
the single outflow; ventilation runs from ICU entry on its own counter.

Hazard curves are precomputed per cohort row, so repetitions reduce to
integer indexing plus uniform draws and are cheap to run by the thousand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .hazard import HazardModel, PatientRecord, predict_hazard_matrix

__all__ = [
    "ScenarioSpec",
    "EmpiricalCohort",
    "SimulatedDemand",
    "empirical_distribution",
    "simulate",
    "summarize",
]

COUNTERS = ("icu_inflow", "icu_outflow", "ventilation_starts", "net_occupancy")


@dataclass
class ScenarioSpec:
    resolution: str  # hospital | region | national
    target_id: str
    hospital_ids: List[str]  # resolved scope
    horizon: int = 30
    mobility_mode: str = "constant"  # constant | user
    mobility_series: Optional[np.ndarray] = None  # (>=horizon, K) in user mode
    repetitions: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.resolution not in ("hospital", "region", "national"):
            raise ValueError(f"unknown resolution {self.resolution!r}")
        if self.mobility_mode not in ("constant", "user"):
            raise ValueError(f"unknown mobility mode {self.mobility_mode!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.hospital_ids:
            raise ValueError("scenario scope resolves to no hospitals")
        if self.mobility_mode == "user":
            if self.mobility_series is None:
                raise ValueError("user mobility mode requires a mobility series")
            self.mobility_series = np.asarray(self.mobility_series, dtype=float)
            if self.mobility_series.shape[0] < self.horizon:
                raise ValueError("user mobility series shorter than the horizon")


@dataclass
class EmpiricalCohort:
    """Uniform-resampling distribution over the in-scope patient features."""

    rows: List[dict]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("cohort is empty")

    def __len__(self):
        return len(self.rows)


def empirical_distribution(
    patients: Sequence[PatientRecord], hospital_ids: Sequence[str]
) -> EmpiricalCohort:
    scope = set(hospital_ids)
    rows = [dict(p.features) for p in patients if p.hospital_id in scope]
    if not rows:
        raise ValueError("no patients in the requested scope")
    return EmpiricalCohort(rows=rows)


@dataclass
class SimulatedDemand:
    horizon: int
    repetitions: int
    per_repetition: Dict[str, np.ndarray]  # counter -> (R, T) integer arrays
    summary: Dict[str, Dict[str, list]] = field(default_factory=dict)

    def to_document(self) -> dict:
        return {
            "horizon": self.horizon,
            "repetitions": self.repetitions,
            "summary": self.summary,
        }


def summarize(per_repetition: Dict[str, np.ndarray]) -> Dict[str, Dict[str, list]]:
    """Per-day mean and order-statistic quantiles per counter."""
    out = {}
    for name, arr in per_repetition.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"counter {name} needs a (repetitions, days) array")
        qs = np.quantile(arr, [0.05, 0.5, 0.95], axis=0)
        out[name] = {
            "mean": arr.mean(axis=0).tolist(),
            "q05": qs[0].tolist(),
            "q50": qs[1].tolist(),
            "q95": qs[2].tolist(),
        }
    return out


def _first_success(uniforms: np.ndarray, hazards: np.ndarray):
    """First day tau (1-based) with a Bernoulli success, 0 when none."""
    hits = uniforms < hazards
    any_hit = hits.any(axis=1)
    tau = np.where(any_hit, hits.argmax(axis=1) + 1, 0)
    return tau


def simulate(
    spec: ScenarioSpec,
    trend_model,
    hazard_models: Dict[str, HazardModel],
    cohort: EmpiricalCohort,
) -> SimulatedDemand:
    """Run the scenario and return per-repetition counters plus the summary.

    `trend_model` must provide forecast(hospital_id, future_mobility,
    mc_samples, seed) and constant_mobility(hospital_id, horizon).
    """
    for outcome in ("icu", "mortality", "discharge", "ventilation"):
        if outcome not in hazard_models:
            raise ValueError(f"missing hazard model for outcome {outcome!r}")

    horizon = spec.horizon
    reps = spec.repetitions
    hospitals = sorted(spec.hospital_ids)

    # One aligned forecast per hospital: repetition r consumes sample row r.
    arrivals = {}
    for hid in hospitals:
        if spec.mobility_mode == "user":
            mobility = spec.mobility_series[:horizon]
        else:
            mobility = trend_model.constant_mobility(hid, horizon)
        fc = trend_model.forecast(hid, mobility, mc_samples=reps, seed=spec.seed)
        sampled = np.asarray(fc.samples, dtype=float)
        if sampled.shape != (reps, horizon):
            raise ValueError(
                f"forecast for {hid} returned shape {sampled.shape}, "
                f"expected {(reps, horizon)}"
            )
        arrivals[hid] = np.maximum(
            np.rint(sampled), 0.0  # round half to even, floor at zero
        ).astype(int)

    # Hazard curves per distinct cohort row, computed once.
    curves = {
        outcome: predict_hazard_matrix(model, cohort.rows)
        for outcome, model in hazard_models.items()
    }
    h_icu = curves["icu"]
    h_mort = curves["mortality"]
    h_dis = curves["discharge"]
    h_vent = curves["ventilation"]
    n_cohort, model_h = h_icu.shape

    counters = {
        name: np.zeros((reps, horizon), dtype=int)
        for name in ("icu_inflow", "icu_outflow", "ventilation_starts")
    }
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7_000 + r]))
        for hid in hospitals:
            a_r = arrivals[hid][r]
            n_patients = int(a_r.sum())
            if n_patients == 0:
                continue
            days = np.repeat(np.arange(1, horizon + 1), a_r)
            idx = rng.integers(0, n_cohort, size=n_patients)
            tau_icu = _first_success(
                rng.uniform(size=(n_patients, model_h)), h_icu[idx]
            )
            entered = tau_icu > 0
            icu_day = days + tau_icu
            valid = entered & (icu_day <= horizon)
            if valid.any():
                counters["icu_inflow"][r] += np.bincount(
                    icu_day[valid], minlength=horizon + 1
                )[1 : horizon + 1]

            icu_idx = idx[valid]
            entry = icu_day[valid]
            n_icu = icu_idx.size
            if n_icu == 0:
                continue
            tau_death = _first_success(
                rng.uniform(size=(n_icu, model_h)), h_mort[icu_idx]
            )
            tau_dis = _first_success(
                rng.uniform(size=(n_icu, model_h)), h_dis[icu_idx]
            )
            tau_out = np.where(
                tau_death > 0,
                np.where((tau_dis > 0) & (tau_dis < tau_death), tau_dis, tau_death),
                tau_dis,
            )
            out_day = entry + tau_out
            out_valid = (tau_out > 0) & (out_day <= horizon)
            if out_valid.any():
                counters["icu_outflow"][r] += np.bincount(
                    out_day[out_valid], minlength=horizon + 1
                )[1 : horizon + 1]

            tau_vent = _first_success(
                rng.uniform(size=(n_icu, model_h)), h_vent[icu_idx]
            )
            vent_day = entry + tau_vent
            vent_valid = (tau_vent > 0) & (vent_day <= horizon)
            if vent_valid.any():
                counters["ventilation_starts"][r] += np.bincount(
                    vent_day[vent_valid], minlength=horizon + 1
                )[1 : horizon + 1]

    net = np.maximum(
        np.cumsum(counters["icu_inflow"] - counters["icu_outflow"], axis=1), 0
    )
    per_repetition = dict(counters)
    per_repetition["net_occupancy"] = net
    return SimulatedDemand(
        horizon=horizon,
        repetitions=reps,
        per_repetition=per_repetition,
        summary=summarize(per_repetition),
    )
