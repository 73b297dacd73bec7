import pytest
from fastapi.testclient import TestClient

from hetloco import storage
from hetloco.api import app


@pytest.fixture
def client(runs_dir):
    return TestClient(app)


def test_health(client):
    body = client.get("/").json()
    assert body["status"] == "ok" and body["service"] == "hetloco"


def test_runs_listing_and_lookup(client):
    assert client.get("/api/runs").json() == []
    storage.create_run_record(storage.get_run_dir("r1"), "r1", "perf", "sweep", {}, {"rows": []})
    listed = client.get("/api/runs").json()
    assert [r["id"] for r in listed] == ["r1"]
    assert client.get("/api/runs/r1").json()["kind"] == "perf"
    assert client.get("/api/runs/nope").status_code == 404


def test_utilization_endpoint(client):
    res = client.post("/api/perf/utilization", json={"bandwidth_bps": 1e8})
    assert res.status_code == 200
    body = res.json()
    assert body["k_over_d"] == 0.125
    assert 0.97 <= body["utilization"] <= 1.0


def test_utilization_rejects_bad_link(client):
    res = client.post("/api/perf/utilization", json={"bandwidth_bps": 0})
    assert res.status_code == 422
    res = client.post("/api/perf/utilization", json={"bandwidth_bps": 1e9, "scenario": {"stages": 0}})
    assert res.status_code == 422
