"""Training flows behind the /train endpoint.

Both kinds evaluate on a held-out split before activation: the trend model
holds out the last stretch of days and scores forecast MAE against the
actual admissions; the hazard bundle holds out a random 20% of patients and
scores day-7 AUC and Brier per outcome.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .. import hazard, trend
from ..evaluation import auc_roc, mae_forecast
from ..search import search
from .config import ServiceConfig
from .storage import DataRoot


def train_trend_model(
    root: DataRoot,
    dataset_id: str,
    artifact_dir: Path,
    config: ServiceConfig,
    overrides: Optional[dict] = None,
) -> dict:
    overrides = overrides or {}
    series, populations, _regions = root.load_series(dataset_id)
    n_days = min(s.n_days for s in series)
    holdout = int(min(7, max(1, round(0.2 * n_days))))
    cutoff = n_days - holdout

    fit_cfg = trend.TrendFitConfig(
        n_steps=int(overrides.get("n_steps", config.trend_steps)),
        seed=int(overrides.get("seed", config.seed)),
        dt=float(overrides.get("dt", config.dt)),
        max_anchors=int(overrides.get("max_anchors", config.trend_anchors)),
    )
    history = [
        trend.HospitalSeries(s.hospital_id, s.admissions[:cutoff], s.mobility[:cutoff])
        for s in series
    ]
    model = trend.fit(history, populations, fit_cfg)

    per_hospital = {}
    for s in series:
        actual = s.admissions[cutoff:n_days]
        future_mob = s.mobility[cutoff:n_days]
        fc = trend.forecast(
            model, s.hospital_id, future_mob,
            mc_samples=config.mc_samples, seed=fit_cfg.seed,
        )
        per_hospital[s.hospital_id] = mae_forecast(actual, fc.mean)

    trend.save_model(model, artifact_dir)
    return {
        "holdout_days": holdout,
        "mae_mean": float(np.mean(list(per_hospital.values()))),
        "mae_per_hospital": per_hospital,
    }


def train_hazard_bundle(
    root: DataRoot,
    dataset_id: str,
    artifact_dir: Path,
    config: ServiceConfig,
    overrides: Optional[dict] = None,
    search_budget: int = 0,
) -> dict:
    overrides = overrides or {}
    records = root.load_patients(dataset_id)
    horizon = int(overrides.get("horizon", config.hazard_horizon))
    outcomes = overrides.get("outcomes", list(hazard.OUTCOMES))
    seed = int(overrides.get("seed", config.seed))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_holdout = max(1, int(0.2 * len(records)))
    held_idx = set(order[:n_holdout].tolist())
    train_recs = [r for i, r in enumerate(records) if i not in held_idx]
    held_recs = [r for i, r in enumerate(records) if i in held_idx]

    pipeline_config = (
        hazard.PipelineConfig.from_dict(overrides["pipeline"])
        if "pipeline" in overrides
        else hazard.default_config()
    )
    search_report = None
    if search_budget > 0:
        space = hazard.reduced_search_space()
        eval_tau = min(7, horizon)

        def objective(cfg):
            pc = hazard.pipeline_config_from_search(cfg)
            return hazard.cross_validate(
                pc, train_recs, outcomes[0], tau=eval_tau,
                folds=config.search_folds, seed=seed,
            ).mean_loss

        result = search(space, objective, budget=search_budget, seed=seed)
        pipeline_config = hazard.pipeline_config_from_search(result.best_config)
        search_report = {
            "budget": len(result.history),
            "best_loss": result.best_loss,
            "best_config": pipeline_config.to_dict(),
        }

    models: Dict[str, hazard.HazardModel] = {}
    metrics: Dict[str, dict] = {}
    eval_tau = min(7, horizon)
    for outcome in outcomes:
        model = hazard.train_hazard_model(
            train_recs, outcome, config=pipeline_config, horizon=horizon, seed=seed
        )
        models[outcome] = model
        slc = hazard.derive_slice(held_recs, outcome, eval_tau)
        entry = {"n_holdout": len(slc), "tau": eval_tau}
        if len(slc) and len(np.unique(slc.labels)) == 2:
            rows = [r.features for r in slc.records]
            probs = hazard.predict_hazard_matrix(model, rows)[:, eval_tau - 1]
            entry["auc"] = auc_roc(probs, slc.labels)
            entry["brier"] = hazard.brier_score(probs, slc.labels)
        metrics[outcome] = entry

    hazard.save_hazard_model(models, artifact_dir)
    if search_report:
        (Path(artifact_dir) / "search.json").write_text(
            json.dumps(search_report, indent=2, sort_keys=True)
        )
    out = {"outcomes": metrics, "horizon": horizon, "n_train": len(train_recs)}
    if search_report:
        out["search"] = search_report
    return out
