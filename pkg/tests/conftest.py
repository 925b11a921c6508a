from __future__ import annotations

import json
import socket
import sys
import time
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dxconsensus.config import ServiceConfig  # noqa: E402
from dxconsensus.mock_backend import MockBackend, Scenario, serve  # noqa: E402
from dxconsensus.transcript import ConversationTurn, parse_turns  # noqa: E402

DATA = resources.files("dxconsensus").joinpath("data")
GOLDEN = Path(__file__).parent / "golden"
MEMBERS = ("llama3", "mistral", "qwen2")
REFERENCE_CASES = (
    "mdd-296.21",
    "bipolar-296.41",
    "panic-300.01",
    "ptsd-309.81",
    "schizophrenia-295.90",
    "gad-300.02",
)


SUITE_BUDGET_S = 30.0
_session_started = time.monotonic()


def pytest_terminal_summary(terminalreporter):
    elapsed = time.monotonic() - _session_started
    verdict = "within" if elapsed < SUITE_BUDGET_S else "OVER"
    terminalreporter.write_line(f"suite runtime {elapsed:.1f}s ({verdict} the {SUITE_BUDGET_S:.0f}s budget)")


def load_scenario(name: str) -> Scenario:
    return Scenario.loads(DATA.joinpath(f"scenarios/{name}.json").read_text("utf-8"))


def load_case_transcript(name: str) -> list[ConversationTurn]:
    obj = json.loads(DATA.joinpath(f"transcripts/{name}.json").read_text("utf-8"))
    return parse_turns(obj["transcript"])


def closed_port_url() -> str:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    return f"http://127.0.0.1:{port}"


def fleet_config(
    url: str | dict[str, str],
    tmp_path: Path,
    *,
    adjudicator: bool = True,
    adjudicator_url: str | None = None,
    timeout_ms: int = 5_000,
    max_retries: int = 2,
    backoff_ms: int = 1,
    deadline_ms: int = 20_000,
    **extra,
) -> ServiceConfig:
    urls = url if isinstance(url, dict) else {m: url for m in MEMBERS}
    common = {"timeout_ms": timeout_ms, "max_retries": max_retries, "retry_backoff_base_ms": backoff_ms}
    raw = {
        "fleet": [
            {"name": m, "base_url": urls[m], "model_id": f"{m}-dx", **common} for m in MEMBERS
        ],
        "audit_path": str(tmp_path / "audit.jsonl"),
        "limits": {"request_deadline_ms": deadline_ms},
        **extra,
    }
    if adjudicator:
        raw["adjudicator"] = {
            "name": "gpt-oss",
            "base_url": adjudicator_url or (url if isinstance(url, str) else urls["llama3"]),
            "model_id": "gpt-oss-dx",
            "role": "adjudicator",
            **common,
        }
    return ServiceConfig.model_validate(raw)


@pytest.fixture
def two_turns() -> list[ConversationTurn]:
    return [
        ConversationTurn("psychiatrist", "How have you been feeling over the past month?"),
        ConversationTurn("patient", "Low almost every day. I stopped seeing friends and I sleep badly."),
    ]


@pytest.fixture
def mock_factory():
    started: list[MockBackend] = []

    def start(scenario: Scenario | dict, port: int = 0) -> MockBackend:
        if isinstance(scenario, dict):
            scenario = Scenario.from_dict(scenario)
        backend = serve(scenario, port)
        started.append(backend)
        return backend

    yield start
    for backend in started:
        backend.stop()
