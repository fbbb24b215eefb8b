import pytest
from fastapi.testclient import TestClient

from lorasched.service.app import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def synthetic_adapter(adapter_id, location, seed_count=48, gbs=8):
    return {
        "adapter_id": adapter_id,
        "global_batch_size": gbs,
        "padding_multiple": 64,
        "distribution": {
            "components": [
                {"weight": 1.0, "location": location, "scale": 0.4,
                 "kind": "lognormal", "min_tokens": 16, "max_tokens": 2048}
            ],
        },
        "count": seed_count,
    }


def base_config(**overrides):
    config = {
        "adapters": [
            synthetic_adapter("a0", 300.0),
            synthetic_adapter("a1", 900.0),
        ],
        "capacity": 4096,
        "stages": 4,
        "timeout_s": 0.05,
        "seed": 7,
        "time_model": {"per_token_cost": 1e-6, "fixed_overhead": 2e-4},
    }
    config.update(overrides)
    return config


def test_healthz(client):
    response = client.get("/healthz")
    assert response.status_code == 200
    assert response.json()["status"] == "ok"


def test_generate_deterministic(client):
    payload = {"config": base_config()}
    a = client.post("/v1/generate", json=payload)
    b = client.post("/v1/generate", json=payload)
    assert a.status_code == 200
    assert a.json() == b.json()
    datasets = a.json()["datasets"]
    assert set(datasets) == {"a0", "a1"}
    assert len(datasets["a0"]) == 48


def test_schedule_endpoint(client):
    response = client.post("/v1/schedule", json={"config": base_config()})
    assert response.status_code == 200
    body = response.json()
    doc = body["schedule"]
    assert doc["schema_version"] == 1
    assert doc["stage_count"] == 4
    assert body["summary"]["sample_count"] == 96
    assert "noops" in body["summary"]

    # The returned document must simulate cleanly.
    sim = client.post(
        "/v1/simulate",
        json={"schedule": doc, "time_model": {"per_token_cost": 1e-6}},
    )
    assert sim.status_code == 200
    result = sim.json()["result"]
    assert 0.0 <= result["bubble_ratio"] <= 1.0
    assert result["tokens_processed"] > 0


def test_schedule_with_inline_samples(client):
    config = base_config()
    config["adapters"][0] = {
        "adapter_id": "a0",
        "global_batch_size": 4,
        "padding_multiple": 64,
        "dataset": {
            "samples": [
                {"adapter_id": "a0", "sample_id": f"s{i}", "length": 100 + i}
                for i in range(8)
            ]
        },
    }
    response = client.post("/v1/schedule", json={"config": config})
    assert response.status_code == 200
    assert response.json()["summary"]["sample_count"] == 8 + 48


def test_simulate_rejects_bad_schedule(client):
    response = client.post(
        "/v1/simulate",
        json={"schedule": {"schema_version": 1, "entries": []}},
    )
    assert response.status_code == 400
    detail = response.json()["detail"]
    assert detail["kind"] == "validation"
    assert "stage_count" in detail["message"]


def test_schedule_capacity_too_small(client):
    config = base_config(capacity=64)
    response = client.post("/v1/schedule", json={"config": config})
    assert response.status_code == 400
    assert response.json()["detail"]["kind"] == "validation"


def test_compare_endpoint(client):
    response = client.post(
        "/v1/compare",
        json={"config": base_config(), "policies": ["fused_schedule", "uniform_fill"]},
    )
    assert response.status_code == 200
    policies = response.json()["policies"]
    assert set(policies) == {"fused_schedule", "uniform_fill"}
    assert policies["fused_schedule"]["bubble_ratio"] < policies["uniform_fill"]["bubble_ratio"]


def test_sweep_endpoint(client):
    config = base_config()
    config["time_model"]["fixed_overhead"] = 5e-4
    response = client.post(
        "/v1/sweep", json={"config": config, "candidates": [512, 1024, 2048]}
    )
    assert response.status_code == 200
    body = response.json()
    assert body["chosen_capacity"] == 2048
    assert [row["capacity"] for row in body["candidates"]] == [512, 1024, 2048]


def test_traffic_endpoint(client):
    response = client.post(
        "/v1/traffic",
        json={"m": 8192, "k": 4096, "n": 4096, "r": 16, "variant": "unfused"},
    )
    assert response.status_code == 200
    body = response.json()
    assert body["total_bytes"] == 1_344_536_576
    assert body["baseline_total_bytes"] == 503_316_480
    assert body["arithmetic_intensity"] == pytest.approx(15.907, abs=1e-3)
    assert body["memory"]["reduction_factor"] == pytest.approx(7.11, abs=0.01)


def test_unknown_field_rejected(client):
    config = base_config()
    config["no_such_field"] = 1
    response = client.post("/v1/schedule", json={"config": config})
    assert response.status_code == 422
    assert "no_such_field" in str(response.json()["detail"])
