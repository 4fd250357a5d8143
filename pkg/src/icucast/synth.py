"""Seeded synthetic-world generator used as the oracle for recovery tests.

Produces two worlds from one config and seed:

* a trend world: per-hospital mobility series that drop around a lockdown
  day, a ground-truth contact rate softplus(w . m(t)) shared across
  hospitals, exact SEIHR trajectories, and Poisson-noised daily admissions;
* a patient world: mixed numeric/categorical features with MCAR
  missingness, per-outcome event days drawn by sequential Bernoulli from a
  logistic hazard with a declared day profile, and independent uniform
  censoring.

Randomness flows from a single seed through named substreams so each world
can be regenerated independently.  Truth tables are written separately from
the observable CSVs and are never read by training code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import epi
from .hazard import OUTCOMES, PatientRecord
from .trend import HospitalSeries

__all__ = [
    "WorldConfig",
    "OutcomeHazardSpec",
    "TrendWorld",
    "PatientWorld",
    "generate_trend_world",
    "generate_patient_world",
    "write_world",
    "load_hospital_table",
    "load_hospital_series",
    "load_patient_records",
    "true_hazard",
]

_SUBSTREAMS = {"mobility": 1, "epidemic": 2, "patients": 3}

# Per-mobility-category lockdown drop; the last category (residential-style)
# moves up when the others fall.
_CATEGORY_DROPS = np.array([0.45, 0.35, 0.25, 0.5, 0.55, -0.25])


@dataclass(frozen=True)
class OutcomeHazardSpec:
    """Logistic hazard truth: sigmoid(base + slope*(tau-1) + scale * z(x))."""

    base: float
    slope: float
    scale: float


def _default_hazards() -> Dict[str, OutcomeHazardSpec]:
    return {
        "icu": OutcomeHazardSpec(base=-4.0, slope=0.0, scale=2.4),
        "mortality": OutcomeHazardSpec(base=-3.6, slope=0.05, scale=0.8),
        "discharge": OutcomeHazardSpec(base=-3.2, slope=0.12, scale=-0.5),
        "ventilation": OutcomeHazardSpec(base=-3.0, slope=-0.05, scale=0.7),
    }


@dataclass
class WorldConfig:
    n_hospitals: int = 20
    n_regions: int = 4
    days: int = 90
    mobility_dim: int = 6
    population_range: Tuple[int, int] = (60_000, 250_000)
    contact_weights: Tuple[float, ...] = (1.1, 0.9, 0.45, 1.3, 1.6, -0.75)
    lockdown_day: int = 25
    lockdown_jitter: int = 3
    mobility_noise: float = 0.02
    pre_lockdown_drift: float = 0.06  # gradual voluntary mobility reduction
    n_patients: int = 4000
    n_numeric: int = 6
    n_categorical: int = 2
    missingness: float = 0.15
    horizon: int = 30
    censor_prob: float = 0.3
    hazards: Dict[str, OutcomeHazardSpec] = field(default_factory=_default_hazards)
    seed: int = 0

    def __post_init__(self):
        if self.n_hospitals < 1 or self.days < 1 or self.n_patients < 1:
            raise ValueError("counts must be >= 1")
        if not (0.0 <= self.missingness <= 1.0 and 0.0 <= self.censor_prob <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if len(self.contact_weights) != self.mobility_dim:
            raise ValueError("contact_weights must have mobility_dim entries")

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, _SUBSTREAMS[stream]])
        )


def hospital_ids(config: WorldConfig) -> List[str]:
    return [f"H{i:03d}" for i in range(config.n_hospitals)]


def region_of(config: WorldConfig, index: int) -> str:
    return f"R{index % config.n_regions}"


@dataclass
class TrendWorld:
    config: WorldConfig
    series: List[HospitalSeries]
    populations: Dict[str, float]
    regions: Dict[str, str]
    true_betas: Dict[str, np.ndarray]  # per-day softplus(w . m), pre-normalization
    true_params: Dict[str, epi.EpidemicParams]
    true_seeds: Dict[str, Tuple[float, float]]  # (e0, i0)
    true_daily_rate: Dict[str, np.ndarray]  # Poisson intensity per day
    lockdown_days: Dict[str, int]

    @property
    def national_admissions(self) -> np.ndarray:
        return np.sum([s.admissions for s in self.series], axis=0)

    @property
    def peak_day(self) -> int:
        # Smooth with a 7-day window so Poisson noise does not pick the peak.
        total = self.national_admissions
        kernel = np.ones(7) / 7.0
        smooth = np.convolve(total, kernel, mode="same")
        return int(np.argmax(smooth)) + 1


def _softplus(x):
    return np.logaddexp(0.0, x)


def generate_trend_world(config: WorldConfig) -> TrendWorld:
    rng_mob = config.rng("mobility")
    rng_epi = config.rng("epidemic")
    ids = hospital_ids(config)
    w = np.asarray(config.contact_weights, dtype=float)

    series, populations, regions = [], {}, {}
    true_betas, true_params, true_seeds, true_rate, lockdowns = {}, {}, {}, {}, {}
    for idx, hid in enumerate(ids):
        pop = float(rng_mob.integers(*config.population_range))
        lock = int(
            config.lockdown_day
            + rng_mob.integers(-config.lockdown_jitter, config.lockdown_jitter + 1)
        )
        depth = rng_mob.uniform(0.85, 1.15)
        mobility = np.zeros((config.days, config.mobility_dim))
        noise = rng_mob.normal(0.0, config.mobility_noise, size=mobility.shape)
        for d in range(config.days):
            day = d + 1
            drift = config.pre_lockdown_drift * min(day / max(lock, 1), 1.0)
            ramp = np.clip((day - lock) / 4.0, 0.0, 1.0)
            mobility[d] = -(drift + ramp * depth) * _CATEGORY_DROPS + noise[d]
        mobility = np.clip(mobility, -1.0, 1.0)

        beta_hat = _softplus(mobility @ w)
        params = epi.EpidemicParams(
            alpha=rng_epi.uniform(0.20, 0.35),
            gamma=rng_epi.uniform(0.18, 0.28),
            eta=rng_epi.uniform(0.08, 0.20),
            population_c=pop,
        )
        e0 = float(rng_epi.uniform(10, 40))
        i0 = float(rng_epi.uniform(10, 40))
        initial = epi.CompartmentState(s=pop - e0 - i0, e=e0, i=i0, h=0.0, r=0.0)
        fine = epi.ContactRateSeries.from_daily(beta_hat / pop, dt=0.02)
        traj = epi.integrate_euler(initial, fine, params, horizon_days=config.days)
        rate = epi.daily_admission_prior(traj)
        admissions = rng_epi.poisson(rate).astype(float)

        series.append(HospitalSeries(hospital_id=hid, admissions=admissions, mobility=mobility))
        populations[hid] = pop
        regions[hid] = region_of(config, idx)
        true_betas[hid] = beta_hat
        true_params[hid] = params
        true_seeds[hid] = (e0, i0)
        true_rate[hid] = rate
        lockdowns[hid] = lock

    return TrendWorld(
        config=config,
        series=series,
        populations=populations,
        regions=regions,
        true_betas=true_betas,
        true_params=true_params,
        true_seeds=true_seeds,
        true_daily_rate=true_rate,
        lockdown_days=lockdowns,
    )


# ---------------------------------------------------------------------------
# Patient world
# ---------------------------------------------------------------------------

_CAT_LEVELS = [("a", "b", "c"), ("x", "y")]
_CAT_EFFECTS = [{"a": -0.4, "b": 0.0, "c": 0.6}, {"x": -0.25, "y": 0.25}]
# Numeric effect weights; padded/truncated to n_numeric.
_NUM_WEIGHTS = np.array([0.9, -0.6, 0.5, 0.35, 0.0, 0.0, 0.25, -0.2])

# Outcome priority for same-day tie bumping (first listed wins the day).
_TIE_PRIORITY = ("icu", "mortality", "discharge", "ventilation")


@dataclass
class PatientWorld:
    config: WorldConfig
    records: List[PatientRecord]
    complete_features: pd.DataFrame  # pre-missingness values, truth side
    linear_scores: np.ndarray  # z(x) per patient
    hazards: Dict[str, OutcomeHazardSpec]

    def true_hazard(self, outcome: str, tau, z=None) -> np.ndarray:
        spec = self.hazards[outcome]
        z = self.linear_scores if z is None else np.asarray(z)
        tau = np.asarray(tau, dtype=float)
        logits = spec.base + spec.slope * (tau - 1.0) + spec.scale * z
        return 1.0 / (1.0 + np.exp(-logits))


def true_hazard(spec: OutcomeHazardSpec, tau, z) -> np.ndarray:
    logits = spec.base + spec.slope * (np.asarray(tau, dtype=float) - 1.0) + spec.scale * np.asarray(z)
    return 1.0 / (1.0 + np.exp(-logits))


def _numeric_weights(n_numeric: int) -> np.ndarray:
    w = np.zeros(n_numeric)
    take = min(n_numeric, len(_NUM_WEIGHTS))
    w[:take] = _NUM_WEIGHTS[:take]
    return w


def generate_patient_world(config: WorldConfig) -> PatientWorld:
    rng = config.rng("patients")
    ids = hospital_ids(config)
    n = config.n_patients
    n_num = config.n_numeric
    n_cat = min(config.n_categorical, len(_CAT_LEVELS))

    numeric = rng.standard_normal((n, n_num))
    cat_values = []
    cat_effect = np.zeros(n)
    for c in range(n_cat):
        levels = _CAT_LEVELS[c]
        draws = rng.integers(0, len(levels), size=n)
        values = np.array(levels, dtype=object)[draws]
        cat_values.append(values)
        cat_effect += np.array([_CAT_EFFECTS[c][v] for v in values])

    z = numeric @ _numeric_weights(n_num) + cat_effect
    hospital_idx = rng.integers(0, len(ids), size=n)
    admission_days = rng.integers(1, config.days + 1, size=n)

    censor = np.full(n, config.horizon, dtype=int)
    censored_mask = rng.uniform(size=n) < config.censor_prob
    censor[censored_mask] = rng.integers(1, config.horizon + 1, size=int(censored_mask.sum()))

    # Sequential Bernoulli event days per outcome, then bump rare same-day
    # collisions down the priority list so no record carries a tie.
    event_days: Dict[str, np.ndarray] = {}
    for outcome in OUTCOMES:
        spec = config.hazards[outcome]
        u = rng.uniform(size=(n, config.horizon))
        taus = np.arange(1, config.horizon + 1)
        h = true_hazard(spec, taus[None, :], z[:, None])
        hits = u < h
        first = np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, 0)
        event_days[outcome] = first  # 0 means no event within horizon

    for i in range(n):
        taken = set()
        for outcome in _TIE_PRIORITY:
            day = int(event_days[outcome][i])
            if day == 0:
                continue
            while day in taken and day <= config.horizon:
                day += 1
            if day > config.horizon:
                event_days[outcome][i] = 0
            else:
                event_days[outcome][i] = day
                taken.add(day)

    num_cols = [f"num_{j}" for j in range(n_num)]
    cat_cols = [f"cat_{j}" for j in range(n_cat)]
    complete = pd.DataFrame(numeric, columns=num_cols)
    for j, values in enumerate(cat_values):
        complete[cat_cols[j]] = values

    missing_mask = rng.uniform(size=(n, n_num + n_cat)) < config.missingness

    records: List[PatientRecord] = []
    for i in range(n):
        features: Dict[str, object] = {}
        for j, col in enumerate(num_cols):
            features[col] = None if missing_mask[i, j] else float(numeric[i, j])
        for j, col in enumerate(cat_cols):
            features[col] = None if missing_mask[i, n_num + j] else str(cat_values[j][i])
        outcomes: Dict[str, Optional[int]] = {}
        for outcome in OUTCOMES:
            day = int(event_days[outcome][i])
            outcomes[outcome] = day if 0 < day <= censor[i] else None
        records.append(
            PatientRecord(
                patient_id=f"P{i:06d}",
                features=features,
                hospital_id=ids[hospital_idx[i]],
                admission_day=int(admission_days[i]),
                outcomes=outcomes,
                censor_day=int(censor[i]),
            )
        )

    return PatientWorld(
        config=config,
        records=records,
        complete_features=complete,
        linear_scores=z,
        hazards=dict(config.hazards),
    )


# ---------------------------------------------------------------------------
# Delimited-text interchange
# ---------------------------------------------------------------------------


def write_world(
    directory,
    trend: TrendWorld,
    patients: Optional[PatientWorld] = None,
    include_truth: bool = True,
) -> None:
    """Write observable CSV tables, plus truth tables under truth/."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = [s.hospital_id for s in trend.series]

    pd.DataFrame(
        {
            "hospital_id": ids,
            "region": [trend.regions[h] for h in ids],
            "population": [int(trend.populations[h]) for h in ids],
        }
    ).to_csv(directory / "hospitals.csv", index=False)

    mob_rows, adm_rows = [], []
    for s in trend.series:
        for d in range(s.n_days):
            mob_rows.append(
                {"hospital_id": s.hospital_id, "day": d + 1}
                | {f"m{k + 1}": s.mobility[d, k] for k in range(s.mobility_dim)}
            )
            adm_rows.append(
                {
                    "hospital_id": s.hospital_id,
                    "day": d + 1,
                    "admissions": int(s.admissions[d]),
                }
            )
    pd.DataFrame(mob_rows).to_csv(directory / "mobility.csv", index=False)
    pd.DataFrame(adm_rows).to_csv(directory / "admissions.csv", index=False)

    if patients is not None:
        rows = []
        for rec in patients.records:
            row = {
                "patient_id": rec.patient_id,
                "hospital_id": rec.hospital_id,
                "admission_day": rec.admission_day,
            }
            row.update({k: ("" if v is None else v) for k, v in rec.features.items()})
            for outcome in OUTCOMES:
                day = rec.outcomes.get(outcome)
                row[f"event_{outcome}"] = "" if day is None else int(day)
            row["censor_day"] = rec.censor_day
            rows.append(row)
        pd.DataFrame(rows).to_csv(directory / "patients.csv", index=False)

    if include_truth:
        truth_dir = directory / "truth"
        truth_dir.mkdir(exist_ok=True)
        beta_rows = []
        for hid in ids:
            for d, b in enumerate(trend.true_betas[hid]):
                beta_rows.append({"hospital_id": hid, "day": d + 1, "beta": b})
        pd.DataFrame(beta_rows).to_csv(truth_dir / "contact_rates.csv", index=False)
        param_rows = []
        for hid in ids:
            p = trend.true_params[hid]
            e0, i0 = trend.true_seeds[hid]
            param_rows.append(
                {
                    "hospital_id": hid,
                    "alpha": p.alpha,
                    "gamma": p.gamma,
                    "eta": p.eta,
                    "population": p.population_c,
                    "e0": e0,
                    "i0": i0,
                    "lockdown_day": trend.lockdown_days[hid],
                }
            )
        pd.DataFrame(param_rows).to_csv(truth_dir / "epidemic_params.csv", index=False)
        if patients is not None:
            (truth_dir / "hazard_spec.json").write_text(
                json.dumps(
                    {k: vars(v) for k, v in patients.hazards.items()},
                    indent=2,
                    sort_keys=True,
                )
            )


def load_hospital_table(directory) -> pd.DataFrame:
    return pd.read_csv(Path(directory) / "hospitals.csv")


def load_hospital_series(directory):
    """Read hospitals/mobility/admissions tables back into model inputs."""
    directory = Path(directory)
    hosp = pd.read_csv(directory / "hospitals.csv")
    mob = pd.read_csv(directory / "mobility.csv").sort_values(["hospital_id", "day"])
    adm = pd.read_csv(directory / "admissions.csv").sort_values(["hospital_id", "day"])
    mcols = sorted(
        (c for c in mob.columns if c.startswith("m") and c[1:].isdigit()),
        key=lambda c: int(c[1:]),
    )
    series = []
    for hid in hosp["hospital_id"]:
        m = mob[mob["hospital_id"] == hid]
        a = adm[adm["hospital_id"] == hid]
        series.append(
            HospitalSeries(
                hospital_id=hid,
                admissions=a["admissions"].to_numpy(dtype=float),
                mobility=m[mcols].to_numpy(dtype=float),
            )
        )
    populations = dict(zip(hosp["hospital_id"], hosp["population"].astype(float)))
    regions = dict(zip(hosp["hospital_id"], hosp["region"]))
    return series, populations, regions


def load_patient_records(directory) -> List[PatientRecord]:
    df = pd.read_csv(Path(directory) / "patients.csv")
    fixed = {"patient_id", "hospital_id", "admission_day", "censor_day"} | {
        f"event_{o}" for o in OUTCOMES
    }
    feature_cols = [c for c in df.columns if c not in fixed]
    records = []
    for _, row in df.iterrows():
        features = {}
        for col in feature_cols:
            v = row[col]
            if pd.isna(v):
                features[col] = None
            elif col.startswith("cat_"):
                features[col] = str(v)
            else:
                features[col] = float(v)
        outcomes = {}
        for outcome in OUTCOMES:
            v = row[f"event_{outcome}"]
            outcomes[outcome] = None if pd.isna(v) else int(v)
        records.append(
            PatientRecord(
                patient_id=str(row["patient_id"]),
                features=features,
                hospital_id=str(row["hospital_id"]),
                admission_day=int(row["admission_day"]),
                outcomes=outcomes,
                censor_day=int(row["censor_day"]),
            )
        )
    return records
