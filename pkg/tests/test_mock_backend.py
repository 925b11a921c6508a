import json
import socket

import httpx
import pytest

from conftest import REFERENCE_CASES, load_scenario
from dxconsensus.mock_backend import MockBackend, PortInUse, Scenario, ScenarioError
from dxconsensus.prompts import sha256_hex


def post(url, model, prompt, timeout=5.0):
    return httpx.post(f"{url}/api/generate", json={"model": model, "prompt": prompt, "stream": False}, timeout=timeout)


def test_rules_first_match_wins(mock_factory):
    mock = mock_factory({
        "id": "r",
        "rules": [
            {"model": "a", "contains": "sleep", "response": "A-sleep"},
            {"digest": sha256_hex("exact"), "response": "by digest"},
            {"model": "a", "response": "A-any"},
        ],
        "default_response": "fallback",
    })
    assert post(mock.url, "a", "poor sleep").json()["response"] == "A-sleep"
    assert post(mock.url, "a", "other").json()["response"] == "A-any"
    assert post(mock.url, "b", "exact").json()["response"] == "by digest"
    assert post(mock.url, "b", "other").json()["response"] == "fallback"


def test_request_log_records_digest_and_fault(mock_factory):
    mock = mock_factory({"id": "log", "model_faults": {"a": ["http_500", "ok"]}})
    assert post(mock.url, "a", "x").status_code == 500
    assert post(mock.url, "a", "x").status_code == 200
    assert post(mock.url, "b", "y").status_code == 200
    log = mock.request_log()
    assert [(e.seq, e.model_seq, e.model, e.fault) for e in log] == [
        (0, 0, "a", "http_500"), (1, 1, "a", "ok"), (2, 0, "b", "ok"),
    ]
    assert log[2].digest == sha256_hex("y") and log[2].prompt == "y"
    assert mock.request_counts() == {"a": 2, "b": 1}


def test_last_fault_repeats(mock_factory):
    mock = mock_factory({"id": "rep", "fault_plan": ["ok", "http_500"]})
    codes = [post(mock.url, "m", "p").status_code for _ in range(4)]
    assert codes == [200, 500, 500, 500]


def test_malformed_body(mock_factory):
    mock = mock_factory({"id": "mal", "fault_plan": ["malformed"]})
    resp = post(mock.url, "m", "p")
    assert resp.status_code == 200
    with pytest.raises(ValueError):
        resp.json()


def test_hang_exceeds_client_timeout(mock_factory):
    mock = mock_factory({"id": "hang", "fault_plan": ["hang:2000"]})
    with pytest.raises(httpx.TimeoutException):
        post(mock.url, "m", "p", timeout=0.1)


def test_bad_request_and_unknown_paths(mock_factory):
    mock = mock_factory({"id": "x"})
    assert httpx.post(f"{mock.url}/api/generate", content=b"{not json").status_code == 400
    assert httpx.post(f"{mock.url}/api/generate", json={"model": 1, "prompt": "p"}).status_code == 400
    assert httpx.get(f"{mock.url}/nope").status_code == 404
    assert httpx.get(f"{mock.url}/").text == "Ollama is running"
    assert mock.request_log() == []


def test_tags(mock_factory):
    mock = mock_factory({"id": "t", "models": ["a", "b"]})
    assert httpx.get(f"{mock.url}/api/tags").json() == {"models": [{"name": "a"}, {"name": "b"}]}


def test_latency_range_is_seeded():
    a = Scenario.from_dict({"id": "l", "latency_ms": [1, 5], "seed": 4})
    assert a.latency_ms == (1, 5)
    assert Scenario.from_dict({"id": "l", "latency_ms": 3}).latency_ms == (3, 3)


@pytest.mark.parametrize(
    "obj",
    [
        {"rules": []},
        {"id": "x", "unknown": 1},
        {"id": "x", "rules": [{"model": "a"}]},
        {"id": "x", "rules": [{"response": "r", "regex": "."}]},
        {"id": "x", "fault_plan": []},
        {"id": "x", "fault_plan": ["explode"]},
        {"id": "x", "fault_plan": ["hang"]},
        {"id": "x", "health": "sometimes"},
    ],
)
def test_scenario_validation(obj):
    with pytest.raises(ScenarioError):
        Scenario.from_dict(obj)


def test_port_in_use():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        with pytest.raises(PortInUse):
            MockBackend(Scenario("x"), port=s.getsockname()[1])


def test_stop_is_idempotent_and_refuses_after():
    mock = MockBackend(Scenario("x"))
    url = mock.url
    mock.stop()
    mock.stop()
    with pytest.raises(httpx.ConnectError):
        httpx.get(url, timeout=1)


@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_packaged_case_scenarios_load(case):
    sc = load_scenario(case)
    code = case.rsplit("-", 1)[1]
    assert sc.respond("gpt-oss-dx", "anything").rstrip().split("Final diagnosis: ")[-1].startswith(code)


def test_scenarios_are_plain_json():
    from conftest import DATA

    for entry in DATA.joinpath("scenarios").iterdir():
        obj = json.loads(entry.read_text("utf-8"))
        assert Scenario.from_dict(obj).id == obj["id"] == entry.name.removesuffix(".json")
