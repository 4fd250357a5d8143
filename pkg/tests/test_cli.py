import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from icucast.cli import main


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    world = tmp / "world"
    root = tmp / "root"

    r = runner.invoke(
        main,
        ["gen-data", "--out", str(world), "--hospitals", "3", "--days", "40",
         "--patients", "400", "--seed", "5"],
    )
    assert r.exit_code == 0, r.output

    r = runner.invoke(
        main, ["--data-root", str(root), "ingest", "--dataset-dir", str(world)]
    )
    assert r.exit_code == 0, r.output
    dataset_id = json.loads(r.output)["dataset_id"]

    r = runner.invoke(
        main,
        ["--data-root", str(root), "train-trend", "--dataset-id", dataset_id,
         "--overrides", '{"n_steps": 120}'],
    )
    assert r.exit_code == 0, r.output

    r = runner.invoke(
        main,
        ["--data-root", str(root), "train-risk", "--dataset-id", dataset_id,
         "--overrides", '{"horizon": 5}'],
    )
    assert r.exit_code == 0, r.output
    return {"runner": runner, "root": root, "world": world, "dataset_id": dataset_id}


class TestCliFlow:
    def test_gen_data_writes_tables(self, cli_env):
        world = cli_env["world"]
        for name in ("hospitals.csv", "mobility.csv", "admissions.csv", "patients.csv"):
            assert (world / name).exists()
        assert (world / "truth" / "contact_rates.csv").exists()

    def test_forecast_command(self, cli_env, tmp_path):
        out = tmp_path / "fc.json"
        r = cli_env["runner"].invoke(
            main,
            ["--data-root", str(cli_env["root"]), "forecast",
             "--resolution", "hospital", "--target", "H000",
             "--horizon", "6", "--samples", "30", "--out", str(out)],
        )
        assert r.exit_code == 0, r.output
        doc = json.loads(out.read_text())
        assert doc["horizon"] == 6
        assert len(doc["mean"]) == 6

    def test_simulate_command(self, cli_env, tmp_path):
        out = tmp_path / "sim.json"
        r = cli_env["runner"].invoke(
            main,
            ["--data-root", str(cli_env["root"]), "simulate",
             "--resolution", "national", "--target", "",
             "--horizon", "8", "--repetitions", "15", "--out", str(out)],
        )
        assert r.exit_code == 0, r.output
        doc = json.loads(out.read_text())
        assert set(doc["summary"]) == {
            "icu_inflow", "icu_outflow", "ventilation_starts", "net_occupancy",
        }

    def test_forecast_remote_error_is_reported(self, cli_env):
        r = cli_env["runner"].invoke(
            main,
            ["--data-root", str(cli_env["root"]), "forecast",
             "--model-id", "ghost", "--resolution", "hospital", "--target", "H000"],
        )
        assert r.exit_code == 1
        assert "model_not_found" in r.output

    def test_evaluate_command(self, cli_env, tmp_path):
        out = tmp_path / "report.json"
        r = cli_env["runner"].invoke(
            main,
            ["evaluate", "--world-dir", str(cli_env["world"]),
             "--steps", "120", "--out", str(out)],
        )
        assert r.exit_code == 0, r.output
        report = json.loads(out.read_text())
        assert set(report["methods"]) == {"hgpcp", "zero_gp", "compartmental"}
        assert {row["stage"] for row in report["national"]} == {
            "pre_peak", "at_peak", "post_peak",
        }
        assert "national" in r.output
