"""Command line client.

Every data-path command talks to the HTTP API: either a remote server via
--url, or an in-process application bound to --data-root when no URL is
given, so the wire contract is exercised identically in both modes.
`gen-data`, `evaluate` and `serve` run locally by nature.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np


def _client(url, data_root, config_path):
    import httpx

    if url:
        return httpx.Client(base_url=url, timeout=3600.0)
    from fastapi.testclient import TestClient

    from .service import ServiceConfig, create_app

    app = create_app(data_root=data_root, config=ServiceConfig.load(config_path))
    return TestClient(app)


def _fail(response):
    click.echo(f"error {response.status_code}: {response.text}", err=True)
    sys.exit(1)


def _emit(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out}")
    else:
        click.echo(text)


@click.group()
@click.option("--data-root", default=None, help="Data root (or ICUCAST_DATA_ROOT).")
@click.option("--url", default=None, help="Remote service URL; in-process when omitted.")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.pass_context
def main(ctx, data_root, url, config_path):
    ctx.ensure_object(dict)
    ctx.obj.update(data_root=data_root, url=url, config_path=config_path)


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--hospitals", default=20, show_default=True)
@click.option("--days", default=90, show_default=True)
@click.option("--patients", default=4000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def gen_data(out, hospitals, days, patients, seed):
    """Generate a synthetic world (observable CSVs plus truth tables)."""
    from .synth import WorldConfig, generate_patient_world, generate_trend_world, write_world

    config = WorldConfig(n_hospitals=hospitals, days=days, n_patients=patients, seed=seed)
    trend_world = generate_trend_world(config)
    patient_world = generate_patient_world(config)
    write_world(out, trend_world, patient_world)
    click.echo(f"wrote world to {out} (peak day {trend_world.peak_day})")


@main.command()
@click.option("--dataset-dir", required=True, type=click.Path(exists=True))
@click.pass_context
def ingest(ctx, dataset_dir):
    """Upload a CSV bundle from a directory and print the dataset id."""
    directory = Path(dataset_dir)
    body = {
        "hospitals_csv": (directory / "hospitals.csv").read_text(),
        "mobility_csv": (directory / "mobility.csv").read_text(),
        "admissions_csv": (directory / "admissions.csv").read_text(),
    }
    patients = directory / "patients.csv"
    if patients.exists():
        body["patients_csv"] = patients.read_text()
    with _client(**ctx.obj) as client:
        response = client.post("/datasets", json=body)
        if response.status_code != 200:
            _fail(response)
        _emit(response.json(), None)


def _train(ctx, dataset_id, kind, model_id, overrides, search_budget):
    body = {"dataset_id": dataset_id, "kind": kind}
    if model_id:
        body["model_id"] = model_id
    if overrides:
        body["config"] = json.loads(overrides)
    if search_budget:
        body["search_budget"] = search_budget
    with _client(**ctx.obj) as client:
        response = client.post("/train", json=body)
        if response.status_code != 200:
            _fail(response)
        _emit(response.json(), None)


@main.command("train-trend")
@click.option("--dataset-id", required=True)
@click.option("--model-id", default=None)
@click.option("--overrides", default=None, help="JSON fit overrides, e.g. '{\"n_steps\": 400}'.")
@click.pass_context
def train_trend(ctx, dataset_id, model_id, overrides):
    """Fit the admission-trend model and activate a new version."""
    _train(ctx, dataset_id, "trend", model_id, overrides, None)


@main.command("train-risk")
@click.option("--dataset-id", required=True)
@click.option("--model-id", default=None)
@click.option("--overrides", default=None, help="JSON overrides, e.g. '{\"horizon\": 10}'.")
@click.pass_context
def train_risk(ctx, dataset_id, model_id, overrides):
    """Fit the per-outcome hazard bundle with the default pipeline."""
    _train(ctx, dataset_id, "hazard", model_id, overrides, None)


@main.command("search-pipelines")
@click.option("--dataset-id", required=True)
@click.option("--model-id", default=None)
@click.option("--budget", default=30, show_default=True)
@click.option("--overrides", default=None)
@click.pass_context
def search_pipelines(ctx, dataset_id, model_id, budget, overrides):
    """Hazard training with Bayesian-optimization pipeline selection."""
    _train(ctx, dataset_id, "hazard", model_id, overrides, budget)


@main.command()
@click.option("--model-id", default="trend", show_default=True)
@click.option("--resolution", type=click.Choice(["hospital", "region", "national"]), default="hospital")
@click.option("--target", default="")
@click.option("--horizon", default=30, show_default=True)
@click.option("--mobility-file", type=click.Path(exists=True), default=None,
              help="CSV with K mobility columns; switches to user mobility mode.")
@click.option("--samples", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path())
@click.pass_context
def forecast(ctx, model_id, resolution, target, horizon, mobility_file, samples, seed, out):
    """Request an admission forecast document."""
    body = {
        "model_id": model_id,
        "scope": {"resolution": resolution, "target_id": target},
        "horizon": horizon,
        "mc_samples": samples,
        "seed": seed,
        "mobility_mode": "constant",
    }
    if mobility_file:
        series = np.loadtxt(mobility_file, delimiter=",", skiprows=1)
        body["mobility_mode"] = "user"
        body["mobility_series"] = np.atleast_2d(series).tolist()
    with _client(**ctx.obj) as client:
        response = client.post("/forecast", json=body)
        if response.status_code != 200:
            _fail(response)
        _emit(response.json(), out)


@main.command()
@click.option("--trend-model-id", default="trend", show_default=True)
@click.option("--hazard-model-id", default="hazard", show_default=True)
@click.option("--dataset-id", default=None)
@click.option("--resolution", type=click.Choice(["hospital", "region", "national"]), default="hospital")
@click.option("--target", default="")
@click.option("--horizon", default=30, show_default=True)
@click.option("--repetitions", default=100, show_default=True)
@click.option("--mobility-file", type=click.Path(exists=True), default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path())
@click.pass_context
def simulate(ctx, trend_model_id, hazard_model_id, dataset_id, resolution, target,
             horizon, repetitions, mobility_file, seed, out):
    """Run a what-if scenario and print the demand document."""
    body = {
        "trend_model_id": trend_model_id,
        "hazard_model_id": hazard_model_id,
        "scope": {"resolution": resolution, "target_id": target},
        "horizon": horizon,
        "repetitions": repetitions,
        "seed": seed,
        "mobility_mode": "constant",
    }
    if dataset_id:
        body["dataset_id"] = dataset_id
    if mobility_file:
        series = np.loadtxt(mobility_file, delimiter=",", skiprows=1)
        body["mobility_mode"] = "user"
        body["mobility_series"] = np.atleast_2d(series).tolist()
    with _client(**ctx.obj) as client:
        response = client.post("/simulate", json=body)
        if response.status_code != 200:
            _fail(response)
        _emit(response.json(), out)


@main.command()
@click.option("--world-dir", required=True, type=click.Path(exists=True),
              help="Directory produced by gen-data.")
@click.option("--steps", default=800, show_default=True, help="Trend fit steps.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path())
def evaluate(world_dir, steps, seed, out):
    """Benchmark the trend model against both baselines on a stored world."""
    from . import trend as trend_mod
    from .evaluation import (
        baseline_compartmental,
        baseline_zero_mean_gp,
        benchmark_report,
        default_cutoffs,
        format_text_table,
    )
    from .synth import load_hospital_series

    series, populations, _ = load_hospital_series(world_dir)
    total = np.sum([s.admissions for s in series], axis=0)
    smooth = np.convolve(total, np.ones(7) / 7.0, mode="same")
    peak_day = int(np.argmax(smooth)) + 1
    cutoffs = default_cutoffs(peak_day, len(total))

    def hgpcp_method(history, horizon, future_mobility, _cache={}):
        key = history.n_days
        if key not in _cache:
            cut = history.n_days
            hist_all = [
                trend_mod.HospitalSeries(s.hospital_id, s.admissions[:cut], s.mobility[:cut])
                for s in series
            ]
            cfg = trend_mod.TrendFitConfig(n_steps=steps, seed=seed)
            _cache[key] = trend_mod.fit(hist_all, populations, cfg)
        model = _cache[key]
        return trend_mod.forecast(
            model, history.hospital_id, future_mobility, mc_samples=200, seed=seed
        ).mean

    def gp_method(history, horizon, future_mobility):
        return baseline_zero_mean_gp(history, horizon, seed=seed).mean

    def cm_method(history, horizon, future_mobility):
        pred, _ = baseline_compartmental(
            history, horizon, populations[history.hospital_id], seed=seed
        )
        return pred

    report = benchmark_report(
        series,
        {"hgpcp": hgpcp_method, "zero_gp": gp_method, "compartmental": cm_method},
        cutoffs=cutoffs,
    )
    click.echo(format_text_table(report))
    if out:
        Path(out).write_text(json.dumps(report.to_document(), indent=2, sort_keys=True))
        click.echo(f"wrote {out}")


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.pass_context
def serve(ctx, port, host):
    """Run the HTTP service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    frontend = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = create_app(
        data_root=ctx.obj["data_root"],
        config=ServiceConfig.load(ctx.obj["config_path"]),
        frontend_dist=str(frontend) if frontend.exists() else None,
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
