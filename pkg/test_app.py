import pytest
from fastapi.testclient import TestClient

from app import app


@pytest.fixture
def client():
    return TestClient(app)


def test_root_lists_endpoints(client):
    response = client.get("/")
    assert response.status_code == 200
    assert "POST /simulate" in response.json()["endpoints"]


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert "log_level" in body["configuration"]


def test_validate_valid_config(client, small_config_dict):
    response = client.post("/validate", json=small_config_dict)
    assert response.status_code == 200
    assert response.json() == {"valid": True, "issues": []}


def test_validate_lists_issues(client, small_config_dict):
    small_config_dict["rhc"]["T"] = 0.06
    body = client.post("/validate", json=small_config_dict).json()
    assert body["valid"] is False
    assert any(issue.startswith("rhc.T") for issue in body["issues"])


def test_schema_errors_are_rejected(client):
    response = client.post("/validate", json={"domain": {"d": 3}})
    assert response.status_code == 422


def test_beta_endpoint(client, small_config_dict):
    response = client.post("/beta", json=small_config_dict)
    assert response.status_code == 200
    body = response.json()
    assert [row["N"] for row in body["rows"]] == [1, 2, 3, 4]
    assert 0.5 < body["exponent"] < 2.5
    assert body["tail_min_N"] == 3


def test_failprob_endpoint(client, small_config_dict):
    response = client.post("/failprob", json=small_config_dict)
    assert response.status_code == 200
    body = response.json()
    assert body["family"] == "uniform_affine"
    assert [row["N_bar"] for row in body["rows"]] == [1, 2]
    assert all(0.0 <= row["p_empirical"] <= 1.0 for row in body["rows"])


def test_simulate_rejects_inconsistent_config(client, small_config_dict):
    small_config_dict["dynamics"]["t_end"] = 0.41
    response = client.post("/simulate", json=small_config_dict)
    assert response.status_code == 400
    assert "dynamics.t_end" in response.json()["detail"]


def test_simulate_endpoint(client, small_config_dict):
    response = client.post("/simulate", json=small_config_dict)
    assert response.status_code == 200
    body = response.json()
    assert len(body["series"]) == 21
    assert body["summary"]["family"] == "uniform_affine"
    assert body["series"][-1]["E_H2"] < body["series"][0]["E_H2"]
