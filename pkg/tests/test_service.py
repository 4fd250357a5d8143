import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from icucast import trend
from icucast.service import ServiceConfig, create_app
from icucast.synth import (
    WorldConfig,
    generate_patient_world,
    generate_trend_world,
    write_world,
)


@pytest.fixture(scope="session")
def service(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("service")
    world_dir = tmp / "world"
    cfg = WorldConfig(n_hospitals=3, days=40, n_patients=600, seed=5)
    write_world(world_dir, generate_trend_world(cfg), generate_patient_world(cfg))

    app = create_app(
        data_root=tmp / "root",
        config=ServiceConfig(
            trend_steps=120, hazard_horizon=6, mc_samples=50, repetitions=30
        ),
    )
    client = TestClient(app, raise_server_exceptions=False)

    tables = {
        "hospitals_csv": (world_dir / "hospitals.csv").read_text(),
        "mobility_csv": (world_dir / "mobility.csv").read_text(),
        "admissions_csv": (world_dir / "admissions.csv").read_text(),
        "patients_csv": (world_dir / "patients.csv").read_text(),
    }
    dataset_id = client.post("/datasets", json=tables).json()["dataset_id"]
    assert client.post("/train", json={"dataset_id": dataset_id, "kind": "trend"}).status_code == 200
    assert (
        client.post(
            "/train",
            json={"dataset_id": dataset_id, "kind": "hazard", "config": {"horizon": 6}},
        ).status_code
        == 200
    )
    return {"client": client, "dataset_id": dataset_id, "tables": tables, "tmp": tmp}


class TestHealthAndIngest:
    def test_health(self, service):
        assert service["client"].get("/health").json() == {"status": "ok"}

    def test_same_bytes_same_id(self, service):
        r = service["client"].post("/datasets", json=service["tables"])
        assert r.status_code == 200
        assert r.json()["dataset_id"] == service["dataset_id"]

    def test_negative_admissions_rejected_with_row(self, service):
        tables = dict(service["tables"])
        lines = tables["admissions_csv"].splitlines()
        parts = lines[4].split(",")
        parts[-1] = "-3"
        lines[4] = ",".join(parts)
        tables["admissions_csv"] = "\n".join(lines)
        r = service["client"].post("/datasets", json=tables)
        assert r.status_code == 422
        body = r.json()
        assert body["code"] == "schema_violation"
        assert body["details"]["row"] == 5  # header + 4 data rows

    def test_unknown_hospital_rejected_by_name(self, service):
        tables = dict(service["tables"])
        lines = tables["patients_csv"].splitlines()
        row = lines[3].split(",")
        row[1] = "H999"
        lines[3] = ",".join(row)
        tables["patients_csv"] = "\n".join(lines)
        r = service["client"].post("/datasets", json=tables)
        assert r.status_code == 422
        assert "H999" in r.json()["message"]
        assert r.json()["details"]["hospital_id"] == "H999"

    def test_mobility_out_of_range(self, service):
        tables = dict(service["tables"])
        lines = tables["mobility_csv"].splitlines()
        row = lines[2].split(",")
        row[2] = "1.7"
        lines[2] = ",".join(row)
        tables["mobility_csv"] = "\n".join(lines)
        r = service["client"].post("/datasets", json=tables)
        assert r.status_code == 422
        assert "[-1, 1]" in r.json()["message"]


class TestRegistry:
    def test_retrain_versions_and_archival(self, service):
        client = service["client"]
        models = client.get("/models").json()["models"]
        trend_entries = [m for m in models if m["model_id"] == "trend"]
        assert len(trend_entries) == 1 and trend_entries[0]["version"] == 1

        v1_path = trend_entries[0]["artifact_path"]
        v1_model = trend.load_model(v1_path)
        mob = v1_model.constant_mobility("H000", 5)
        fc_before = trend.forecast(v1_model, "H000", mob, mc_samples=10, seed=4)

        r = client.post("/train", json={"dataset_id": service["dataset_id"], "kind": "trend"})
        assert r.status_code == 200
        assert r.json()["version"] == 2

        models = client.get("/models").json()["models"]
        trend_entries = sorted(
            (m for m in models if m["model_id"] == "trend"), key=lambda m: m["version"]
        )
        assert [m["status"] for m in trend_entries] == ["archived", "active"]

        # archived artifact reloads bit-exactly
        reloaded = trend.load_model(v1_path)
        np.testing.assert_array_equal(
            reloaded.upper_gp.train_targets, v1_model.upper_gp.train_targets
        )
        fc_after = trend.forecast(reloaded, "H000", mob, mc_samples=10, seed=4)
        np.testing.assert_array_equal(fc_before.samples, fc_after.samples)

    def test_failed_training_keeps_active_version(self, service):
        client = service["client"]
        tables = {k: v for k, v in service["tables"].items() if k != "patients_csv"}
        patientless = client.post("/datasets", json=tables).json()["dataset_id"]

        active_before = [
            m
            for m in client.get("/models").json()["models"]
            if m["model_id"] == "hazard" and m["status"] == "active"
        ]
        r = client.post("/train", json={"dataset_id": patientless, "kind": "hazard"})
        assert r.status_code in (422, 500)
        active_after = [
            m
            for m in client.get("/models").json()["models"]
            if m["model_id"] == "hazard" and m["status"] == "active"
        ]
        assert active_before == active_after

    def test_metrics_history_counts_attempts(self, service):
        client = service["client"]
        history = client.get("/models/hazard/metrics").json()["history"]
        statuses = [h["status"] for h in history]
        assert statuses.count("failed") >= 1
        assert statuses.count("ok") >= 1
        # every attempt is recorded: ok for v1 + the failed patient-less run
        assert len(history) >= 2

    def test_single_active_version_invariant(self, service):
        models = service["client"].get("/models").json()["models"]
        for model_id in {m["model_id"] for m in models}:
            active = [
                m for m in models if m["model_id"] == model_id and m["status"] == "active"
            ]
            assert len(active) == 1

    def test_unknown_model_metrics(self, service):
        r = service["client"].get("/models/ghost/metrics")
        assert r.status_code == 404
        assert r.json()["code"] == "model_not_found"


class TestForecastEndpoint:
    def test_unknown_model_envelope(self, service):
        r = service["client"].post(
            "/forecast",
            json={"model_id": "ghost", "scope": {"resolution": "hospital", "target_id": "H000"}},
        )
        assert r.status_code == 404
        body = r.json()
        assert set(body) == {"code", "message", "details"}

    def test_hospital_forecast_document(self, service):
        r = service["client"].post(
            "/forecast",
            json={
                "model_id": "trend",
                "scope": {"resolution": "hospital", "target_id": "H000"},
                "horizon": 7,
                "mc_samples": 40,
                "seed": 1,
            },
        )
        assert r.status_code == 200
        doc = r.json()
        assert doc["horizon"] == 7
        assert len(doc["mean"]) == 7
        assert all(
            doc["q05"][d] <= doc["q50"][d] <= doc["q95"][d] for d in range(7)
        )

    def test_regional_equals_sum_of_members(self, service):
        client = service["client"]
        national = client.post(
            "/forecast",
            json={
                "model_id": "trend",
                "scope": {"resolution": "national", "target_id": ""},
                "horizon": 5,
                "mc_samples": 30,
                "seed": 9,
            },
        ).json()
        parts = []
        for hid in ("H000", "H001", "H002"):
            parts.append(
                client.post(
                    "/forecast",
                    json={
                        "model_id": "trend",
                        "scope": {"resolution": "hospital", "target_id": hid},
                        "horizon": 5,
                        "mc_samples": 30,
                        "seed": 9,
                    },
                ).json()
            )
        summed = np.sum([p["mean"] for p in parts], axis=0)
        np.testing.assert_allclose(national["mean"], summed, rtol=1e-9)

    def test_invalid_request_envelope(self, service):
        r = service["client"].post("/forecast", json={"scope": {"resolution": "galaxy"}})
        assert r.status_code == 422
        assert r.json()["code"] == "invalid_request"


class TestSimulateEndpoint:
    def test_replay_is_byte_identical(self, service):
        body = {
            "scope": {"resolution": "national", "target_id": ""},
            "horizon": 10,
            "repetitions": 25,
            "seed": 12,
        }
        a = service["client"].post("/simulate", json=body)
        b = service["client"].post("/simulate", json=body)
        assert a.status_code == b.status_code == 200
        sa = json.dumps(a.json()["summary"], sort_keys=True).encode()
        sb = json.dumps(b.json()["summary"], sort_keys=True).encode()
        assert sa == sb

    def test_document_contains_intermediate_panels(self, service):
        r = service["client"].post(
            "/simulate",
            json={
                "scope": {"resolution": "hospital", "target_id": "H001"},
                "horizon": 8,
                "repetitions": 10,
                "seed": 3,
            },
        )
        assert r.status_code == 200
        doc = r.json()
        assert set(doc["summary"]) == {
            "icu_inflow", "icu_outflow", "ventilation_starts", "net_occupancy",
        }
        assert doc["admission_forecast"]["horizon"] == 8
        assert set(doc["risk_profiles"]) == {"icu", "mortality", "discharge", "ventilation"}

    def test_user_mobility_too_short(self, service):
        r = service["client"].post(
            "/simulate",
            json={
                "scope": {"resolution": "hospital", "target_id": "H000"},
                "horizon": 10,
                "repetitions": 5,
                "mobility_mode": "user",
                "mobility_series": [[0.0] * 6] * 4,
                "seed": 0,
            },
        )
        assert r.status_code == 422

    def test_preflight_histograms(self, service):
        r = service["client"].post(
            "/simulate/preflight",
            json={"scope": {"resolution": "national", "target_id": ""}},
        )
        assert r.status_code == 200
        doc = r.json()
        assert doc["n_patients"] == 600
        assert "num_0" in doc["features"]
        num0 = doc["features"]["num_0"]
        assert num0["kind"] == "numeric"
        assert sum(num0["counts"]) + num0["missing"] == 600
        cat0 = doc["features"]["cat_0"]
        assert cat0["kind"] == "categorical"
        assert set(cat0["levels"]) <= {"a", "b", "c"}
