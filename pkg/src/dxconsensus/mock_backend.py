"""Scripted model-server emulator with fault injection.

Scenario files are JSON objects::

    {
      "id": "mdd-unanimous",
      "rules": [
        {"model": "gpt-oss-dx", "response": "... Final diagnosis: 296.21 ..."},
        {"contains": "sleeping all day", "response": "Diagnosis: 296.21 ..."},
        {"digest": "<sha256 of prompt>", "response": "..."}
      ],
      "default_response": "Diagnosis: 296.21 Major Depressive Disorder",
      "fault_plan": ["ok"],
      "model_faults": {"mistral-dx": ["http_500", "http_500", "ok"]},
      "latency_ms": 0,
      "health": "ok",
      "seed": 0
    }

Rules are tried in order and every predicate present in a rule must hold.
Fault plan entries are ``ok``, ``http_500``, ``http_400``, ``malformed`` or
``hang:<ms>``. Each model consumes its plan one entry per request, then keeps
repeating the last entry; ``model_faults`` overrides ``fault_plan`` per model.
``latency_ms`` is either a number or a ``[low, high]`` range. ``health`` is
``ok``, ``malformed`` or ``http_500`` and controls ``GET /api/tags``.
"""

from __future__ import annotations

import errno
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

from .prompts import sha256_hex

log = logging.getLogger(__name__)

FAULT_KINDS = ("ok", "http_500", "http_400", "malformed", "hang")
_SCENARIO_KEYS = {
    "id", "rules", "default_response", "fault_plan", "model_faults",
    "latency_ms", "health", "seed", "models", "description",
}
_RULE_KEYS = {"model", "contains", "digest", "response"}


class ScenarioError(ValueError):
    pass


class PortInUse(OSError):
    pass


@dataclass(frozen=True)
class Fault:
    kind: str
    ms: int = 0

    @classmethod
    def parse(cls, spec: Any) -> "Fault":
        if isinstance(spec, dict) and list(spec) == ["hang"]:
            return cls("hang", int(spec["hang"]))
        if not isinstance(spec, str):
            raise ScenarioError(f"bad fault entry {spec!r}")
        if spec.startswith("hang:"):
            return cls("hang", int(spec.split(":", 1)[1]))
        if spec not in FAULT_KINDS or spec == "hang":
            raise ScenarioError(f"unknown fault {spec!r}")
        return cls(spec)

    def __str__(self) -> str:
        return f"hang:{self.ms}" if self.kind == "hang" else self.kind


@dataclass(frozen=True)
class Rule:
    response: str
    model: str | None = None
    contains: str | None = None
    digest: str | None = None

    def matches(self, model: str, prompt: str, digest: str) -> bool:
        if self.model is not None and self.model != model:
            return False
        if self.contains is not None and self.contains not in prompt:
            return False
        if self.digest is not None and self.digest != digest:
            return False
        return True


@dataclass(frozen=True)
class Scenario:
    id: str
    rules: tuple[Rule, ...] = ()
    default_response: str = ""
    fault_plan: tuple[Fault, ...] = (Fault("ok"),)
    model_faults: dict[str, tuple[Fault, ...]] = field(default_factory=dict)
    latency_ms: tuple[int, int] = (0, 0)
    health: str = "ok"
    seed: int = 0
    models: tuple[str, ...] = ()

    def respond(self, model: str, prompt: str) -> str:
        digest = sha256_hex(prompt)
        for rule in self.rules:
            if rule.matches(model, prompt, digest):
                return rule.response
        return self.default_response

    def plan_for(self, model: str) -> tuple[Fault, ...]:
        return self.model_faults.get(model, self.fault_plan)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Scenario":
        unknown = set(obj) - _SCENARIO_KEYS
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        if "id" not in obj:
            raise ScenarioError("scenario needs an id")
        rules = []
        for r in obj.get("rules", []):
            if set(r) - _RULE_KEYS or "response" not in r:
                raise ScenarioError(f"bad rule {r!r}")
            rules.append(Rule(**r))

        def plan(entries: list[Any]) -> tuple[Fault, ...]:
            faults = tuple(Fault.parse(e) for e in entries)
            if not faults:
                raise ScenarioError("fault plan must not be empty")
            return faults

        latency = obj.get("latency_ms", 0)
        if isinstance(latency, (int, float)):
            latency = (int(latency), int(latency))
        else:
            lo, hi = latency
            latency = (int(lo), int(hi))
        health = obj.get("health", "ok")
        if health not in ("ok", "malformed", "http_500"):
            raise ScenarioError(f"unknown health mode {health!r}")
        return cls(
            id=obj["id"],
            rules=tuple(rules),
            default_response=obj.get("default_response", ""),
            fault_plan=plan(obj.get("fault_plan", ["ok"])),
            model_faults={m: plan(p) for m, p in obj.get("model_faults", {}).items()},
            latency_ms=latency,
            health=health,
            seed=int(obj.get("seed", 0)),
            models=tuple(obj.get("models", ())),
        )

    @classmethod
    def loads(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LoggedRequest:
    seq: int
    model_seq: int
    model: str
    prompt: str
    digest: str
    fault: str


class _State:
    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.lock = threading.Lock()
        self.log: list[LoggedRequest] = []
        self.per_model: dict[str, int] = {}
        self.rng = random.Random(scenario.seed)
        self.stopping = threading.Event()

    def admit(self, model: str, prompt: str) -> tuple[LoggedRequest, float]:
        with self.lock:
            n = self.per_model.get(model, 0)
            self.per_model[model] = n + 1
            plan = self.scenario.plan_for(model)
            fault = plan[min(n, len(plan) - 1)]
            lo, hi = self.scenario.latency_ms
            latency = lo if lo == hi else self.rng.uniform(lo, hi)
            entry = LoggedRequest(len(self.log), n, model, prompt, sha256_hex(prompt), str(fault))
            self.log.append(entry)
        return entry, latency


def _handler_for(state: _State) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, format: str, *args: Any) -> None:
            log.debug("mock %s: " + format, state.scenario.id, *args)

        def _send(self, status: int, body: bytes, ctype: str = "application/json") -> None:
            try:
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            except (BrokenPipeError, ConnectionResetError):
                pass

        def _json(self, status: int, obj: Any) -> None:
            self._send(status, json.dumps(obj).encode("utf-8"))

        def do_GET(self) -> None:
            if self.path == "/":
                self._send(200, b"Ollama is running", "text/plain")
            elif self.path == "/api/tags":
                mode = state.scenario.health
                if mode == "malformed":
                    self._send(200, b"<html>not a model list</html>", "text/html")
                elif mode == "http_500":
                    self._json(500, {"error": "injected"})
                else:
                    models = [{"name": m} for m in state.scenario.models]
                    self._json(200, {"models": models})
            else:
                self._json(404, {"error": "not found"})

        def do_POST(self) -> None:
            if self.path != "/api/generate":
                self._json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length) or b"null")
                model, prompt = body["model"], body["prompt"]
                if not isinstance(model, str) or not isinstance(prompt, str):
                    raise TypeError
            except (ValueError, KeyError, TypeError):
                self._json(400, {"error": "request must carry string model and prompt"})
                return
            entry, latency = state.admit(model, prompt)
            fault = Fault.parse(entry.fault)
            if fault.kind == "http_500":
                self._json(500, {"error": "injected server error"})
                return
            if fault.kind == "http_400":
                self._json(400, {"error": "injected client error"})
                return
            if fault.kind == "hang":
                if state.stopping.wait(fault.ms / 1000):
                    return
            if latency and state.stopping.wait(latency / 1000):
                return
            if fault.kind == "malformed":
                self._send(200, b'{"reply": "missing response field"', "application/json")
                return
            text = state.scenario.respond(model, prompt)
            self._json(200, {"model": model, "response": text, "done": True})

    return Handler


class MockBackend:
    """A running emulator; use as a context manager or call ``stop()``."""

    def __init__(self, scenario: Scenario, port: int = 0, host: str = "127.0.0.1") -> None:
        self._state = _State(scenario)
        try:
            self._server = ThreadingHTTPServer((host, port), _handler_for(self._state))
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(errno.EADDRINUSE, f"port {port} is already in use") from None
            raise
        self._server.daemon_threads = True
        self.host, self.port = self._server.server_address[:2]
        self._thread = threading.Thread(
            target=self._server.serve_forever,
            kwargs={"poll_interval": 0.02},
            name=f"mock-{scenario.id}",
            daemon=True,
        )
        self._thread.start()
        self._stopped = False

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def scenario(self) -> Scenario:
        return self._state.scenario

    def request_log(self) -> list[LoggedRequest]:
        with self._state.lock:
            return list(self._state.log)

    def request_counts(self) -> dict[str, int]:
        with self._state.lock:
            return dict(self._state.per_model)

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self._state.stopping.set()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "MockBackend":
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()


def serve(scenario: Scenario, port: int = 0, host: str = "127.0.0.1") -> MockBackend:
    return MockBackend(scenario, port, host)


def request_log(emulator: MockBackend) -> list[LoggedRequest]:
    return emulator.request_log()


def serve_forever(scenario: Scenario, port: int, host: str = "127.0.0.1") -> None:
    backend = serve(scenario, port, host)
    log.info("mock backend %s listening on %s", scenario.id, backend.url)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        backend.stop()
