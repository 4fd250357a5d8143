"""Metrics, baseline forecasters and benchmark runners.

The benchmark mirrors the offline methodology used for admission
forecasting: fit each method on the history up to a cutoff, forecast seven
days, and compare per-day mean absolute error per hospital plus a national
aggregate, at three cutoffs placed relative to the synthetic world's peak.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from . import epi
from . import gp
from .trend import ForecastDistribution, HospitalSeries

__all__ = [
    "auc_roc",
    "mae_forecast",
    "baseline_zero_mean_gp",
    "baseline_compartmental",
    "CompartmentalFit",
    "BenchmarkReport",
    "benchmark_report",
    "format_text_table",
]


def auc_roc(scores, labels) -> float:
    """Rank-based AUC with ties counted 0.5 (Mann-Whitney)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=float)
    sorted_s = s[order]
    i = 0
    rank = 1
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (rank + rank + (j - i))
        rank += j - i + 1
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mae_forecast(truth, predicted) -> float:
    """Mean absolute per-day deviation between two equal-length series."""
    t = np.asarray(truth, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    return float(np.mean(np.abs(t - p)))


# ---------------------------------------------------------------------------
# Baseline 1: zero-mean GP over the day index, mobility ignored.
# ---------------------------------------------------------------------------


def _admissions_of(series) -> np.ndarray:
    return np.asarray(getattr(series, "admissions", series), dtype=float)


def baseline_zero_mean_gp(
    series,
    horizon: int,
    mc_samples: int = 200,
    seed: int = 0,
) -> ForecastDistribution:
    """Data-driven extrapolation with no epidemic prior; mobility ignored."""
    admissions = _admissions_of(series)
    t = admissions.shape[0]
    if t < 3:
        raise ValueError("zero-mean GP baseline needs at least 3 observations")
    days = np.arange(1.0, t + 1.0)[:, None]
    model = gp.fit_hyperparameters(days, admissions, seed=seed)
    future = np.arange(t + 1.0, t + horizon + 1.0)[:, None]
    post = gp.posterior(model, future)
    cov = post.covariance + model.noise_variance * np.eye(horizon)
    rng = np.random.default_rng(seed)
    draws = gp.sample(gp.PosteriorGaussian(post.mean, cov), mc_samples, rng)
    return ForecastDistribution.from_samples(t, np.maximum(draws, 0.0))


# ---------------------------------------------------------------------------
# Baseline 2: constant-beta compartmental fit by multi-start least squares.
# ---------------------------------------------------------------------------


@dataclass
class CompartmentalFit:
    beta: float
    alpha: float
    gamma: float
    eta: float
    e0: float
    i0: float
    sse: float
    converged: bool
    fitted_curve: np.ndarray  # daily admissions over the training window


def _simulate_daily(theta, population: float, days: int, dt: float) -> np.ndarray:
    """Daily admissions for unconstrained parameters (log/logit space)."""
    beta_hat = math.exp(theta[0])
    alpha = math.exp(theta[1])
    gamma = math.exp(theta[2])
    eta = 1.0 / (1.0 + math.exp(-theta[3]))
    e0 = math.exp(theta[4])
    i0 = math.exp(theta[5])
    e0 = min(e0, population * 0.2)
    i0 = min(i0, population * 0.2)
    initial = epi.CompartmentState(
        s=population - e0 - i0, e=e0, i=i0, h=0.0, r=0.0
    )
    beta = epi.ContactRateSeries.from_daily(
        np.full(days, beta_hat / population), dt=dt
    )
    params = epi.EpidemicParams(
        alpha=alpha, gamma=gamma, eta=eta, population_c=population
    )
    traj = epi.integrate_euler(initial, beta, params, horizon_days=days)
    return epi.daily_admission_prior(traj)


def baseline_compartmental(
    series,
    horizon: int,
    population: float,
    n_starts: int = 64,
    seed: int = 0,
    dt: float = 0.5,
) -> "tuple[np.ndarray, CompartmentalFit]":
    """Least-squares constant-beta compartmental fit, extended `horizon` days.

    Seeded multi-start local search over (beta, alpha, gamma, eta, e0, i0) in
    unconstrained space; the forecast is the fitted model's daily admission
    curve continued past the training window (deterministic, no bands).
    """
    y = _admissions_of(series)
    t = y.shape[0]
    rng = np.random.default_rng(seed)

    def residuals(theta):
        try:
            return _simulate_daily(theta, population, t, dt) - y
        except (epi.InvalidParameterError, epi.IntegrationError, OverflowError):
            return np.full(t, 1e6)

    center = np.array(
        [math.log(0.4), math.log(0.25), math.log(0.2), 0.0, math.log(20.0), math.log(20.0)]
    )
    spread = np.array([1.0, 0.6, 0.6, 1.5, 1.5, 1.5])
    best = None
    converged = False
    for k in range(n_starts):
        start = center if k == 0 else center + spread * rng.standard_normal(6)
        try:
            res = least_squares(
                residuals, start, method="lm", max_nfev=400, xtol=1e-10, ftol=1e-10
            )
        except Exception:
            continue
        sse = float(np.sum(res.fun**2))
        if best is None or sse < best[0]:
            best = (sse, res.x)
            converged = res.status > 0
    if best is None:
        raise RuntimeError("compartmental baseline: every start failed")

    sse, theta = best
    full_curve = _simulate_daily(theta, population, t + horizon, dt)
    fit = CompartmentalFit(
        beta=math.exp(theta[0]),
        alpha=math.exp(theta[1]),
        gamma=math.exp(theta[2]),
        eta=1.0 / (1.0 + math.exp(-theta[3])),
        e0=math.exp(theta[4]),
        i0=math.exp(theta[5]),
        sse=sse,
        converged=converged,
        fitted_curve=full_curve[:t],
    )
    return full_curve[t:], fit


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    stages: List[str]
    methods: List[str]
    rows: List[dict]  # {hospital, method, stage, mae}
    national: List[dict]  # {method, stage, mae}

    def to_document(self) -> dict:
        return {
            "stages": self.stages,
            "methods": self.methods,
            "rows": self.rows,
            "national": self.national,
        }

    def mae(self, hospital: Optional[str], method: str, stage: str) -> float:
        if hospital is None:
            pool = (r for r in self.national)
        else:
            pool = (r for r in self.rows if r["hospital"] == hospital)
        for row in pool:
            if row["method"] == method and row["stage"] == stage:
                return row["mae"]
        raise KeyError((hospital, method, stage))


ForecasterFn = Callable[[HospitalSeries, int, np.ndarray], np.ndarray]
# signature: (history_series, horizon, actual_future_mobility) -> per-day mean forecast


def benchmark_report(
    series: Sequence[HospitalSeries],
    methods: Dict[str, ForecasterFn],
    cutoffs: Dict[str, int],
    horizon: int = 7,
) -> BenchmarkReport:
    """Per-hospital and national MAE for each method at each named cutoff."""
    stages = list(cutoffs)
    rows: List[dict] = []
    national: List[dict] = []
    for stage, cutoff in cutoffs.items():
        per_method_sum: Dict[str, np.ndarray] = {m: None for m in methods}
        truth_sum = np.zeros(horizon)
        for s in series:
            if cutoff + horizon > s.n_days:
                raise ValueError(
                    f"cutoff {cutoff} + horizon {horizon} exceeds series length {s.n_days}"
                )
            history = HospitalSeries(
                hospital_id=s.hospital_id,
                admissions=s.admissions[:cutoff],
                mobility=s.mobility[:cutoff],
            )
            actual_future = s.admissions[cutoff : cutoff + horizon]
            future_mobility = s.mobility[cutoff : cutoff + horizon]
            truth_sum = truth_sum + actual_future
            for name, fn in methods.items():
                pred = np.asarray(fn(history, horizon, future_mobility), dtype=float)
                rows.append(
                    {
                        "hospital": s.hospital_id,
                        "method": name,
                        "stage": stage,
                        "mae": mae_forecast(actual_future, pred),
                    }
                )
                per_method_sum[name] = (
                    pred if per_method_sum[name] is None else per_method_sum[name] + pred
                )
        for name in methods:
            national.append(
                {
                    "method": name,
                    "stage": stage,
                    "mae": mae_forecast(truth_sum, per_method_sum[name]),
                }
            )
    return BenchmarkReport(
        stages=stages, methods=list(methods), rows=rows, national=national
    )


def default_cutoffs(peak_day: int, n_days: int, horizon: int = 7) -> Dict[str, int]:
    """Evaluation cutoffs relative to the (synthetic) epidemic peak."""
    pre = max(8, peak_day - 5)
    post = min(n_days - horizon, peak_day + 14)
    return {"pre_peak": pre, "at_peak": min(peak_day, n_days - horizon), "post_peak": post}


def format_text_table(report: BenchmarkReport) -> str:
    """Plain-text aligned table: one row per hospital plus the national row."""
    hospitals = sorted({r["hospital"] for r in report.rows})
    header = ["hospital"] + [
        f"{m}:{s}" for s in report.stages for m in report.methods
    ]
    lines = ["  ".join(f"{h:>14}" for h in header)]
    lookup = {
        (r["hospital"], r["method"], r["stage"]): r["mae"] for r in report.rows
    }
    nat = {(r["method"], r["stage"]): r["mae"] for r in report.national}
    for hosp in hospitals:
        cells = [f"{hosp:>14}"]
        for stage in report.stages:
            for method in report.methods:
                cells.append(f"{lookup[(hosp, method, stage)]:>14.2f}")
        lines.append("  ".join(cells))
    cells = [f"{'national':>14}"]
    for stage in report.stages:
        for method in report.methods:
            cells.append(f"{nat[(method, stage)]:>14.2f}")
    lines.append("  ".join(cells))
    return "\n".join(lines)
