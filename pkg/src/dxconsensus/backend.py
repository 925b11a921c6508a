"""Client for model servers that speak the non-streaming generate protocol.

Wire format::

    POST {base_url}/api/generate  {"model": ..., "prompt": ..., "stream": false}
    200 -> {"response": "<completion>", ...}
    GET  {base_url}/api/tags      -> {"models": [...]}   (liveness probe)
"""

from __future__ import annotations

import asyncio
import enum
import ssl
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Awaitable, Callable, Mapping, Sequence

import httpx
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .prompts import RenderedPrompt

DEFAULT_TIMEOUT_MS = 60_000
DEFAULT_MAX_RETRIES = 2
DEFAULT_BACKOFF_BASE_MS = 250
HEALTH_TIMEOUT_MS = 5_000


class Role(str, enum.Enum):
    CONSORTIUM_MEMBER = "consortium_member"
    ADJUDICATOR = "adjudicator"


class BackendConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(min_length=1)
    base_url: str
    model_id: str = Field(min_length=1)
    role: Role = Role.CONSORTIUM_MEMBER
    timeout_ms: int = Field(DEFAULT_TIMEOUT_MS, gt=0)
    max_retries: int = Field(DEFAULT_MAX_RETRIES, ge=0)
    retry_backoff_base_ms: int = Field(DEFAULT_BACKOFF_BASE_MS, ge=0)
    prompt_template: str | None = None

    @field_validator("base_url")
    @classmethod
    def _strip_slash(cls, v: str) -> str:
        if not v.startswith(("http://", "https://")):
            raise ValueError("base_url must be an http(s) URL")
        return v.rstrip("/")

    def backoff_ms(self, retry_index: int) -> float:
        """Delay before retry number ``retry_index`` (0-based): base * 2**index."""
        return self.retry_backoff_base_ms * 2**retry_index


class BackendError(Exception):
    kind = "backend_error"

    def __init__(self, message: str, *, backend: str = "", attempts: int = 0) -> None:
        super().__init__(message)
        self.backend = backend
        self.attempts = attempts
        self.backoff_ms: list[float] = []
        self.duration_ms: float | None = None

    def describe(self) -> str:
        return f"{self.kind}: {self}"


class BackendTimeout(BackendError):
    kind = "timeout"


class ConnectionFailed(BackendError):
    kind = "connection_failed"


class ServerError(BackendError):
    kind = "server_error"

    def __init__(self, status: int, message: str = "", **kw: Any) -> None:
        super().__init__(message or f"HTTP {status}", **kw)
        self.status = status


class ClientError(BackendError):
    kind = "client_error"

    def __init__(self, status: int, message: str = "", **kw: Any) -> None:
        super().__init__(message or f"HTTP {status}", **kw)
        self.status = status


class MalformedResponse(BackendError):
    kind = "malformed_response"


RETRYABLE = (BackendTimeout, ConnectionFailed, ServerError)


@lru_cache(maxsize=1)
def _ssl_context() -> ssl.SSLContext:
    # Building a context per client costs tens of milliseconds.
    return ssl.create_default_context()


def _client(timeout_s: float) -> httpx.AsyncClient:
    return httpx.AsyncClient(timeout=httpx.Timeout(timeout_s), verify=_ssl_context())


@dataclass
class GenerateExchange:
    backend: str
    request: dict[str, Any]
    text: str
    duration_ms: float
    attempts: int
    backoff_ms: list[float] = field(default_factory=list)


async def _post_once(config: BackendConfig, body: dict[str, Any]) -> str:
    timeout_s = config.timeout_ms / 1000
    url = f"{config.base_url}/api/generate"
    try:
        async with _client(timeout_s) as http:
            resp = await asyncio.wait_for(http.post(url, json=body), timeout_s)
    except (asyncio.TimeoutError, httpx.TimeoutException):
        raise BackendTimeout(f"no response within {config.timeout_ms} ms", backend=config.name) from None
    except httpx.TransportError as exc:
        raise ConnectionFailed(f"{type(exc).__name__}: {exc}", backend=config.name) from None

    if resp.status_code >= 500:
        raise ServerError(resp.status_code, backend=config.name)
    if resp.status_code >= 300:
        raise ClientError(resp.status_code, backend=config.name)
    try:
        payload = resp.json()
    except ValueError:
        raise MalformedResponse("response body is not JSON", backend=config.name) from None
    if not isinstance(payload, dict) or not isinstance(payload.get("response"), str):
        raise MalformedResponse("response body lacks a string 'response' field", backend=config.name)
    return payload["response"]


async def generate(
    config: BackendConfig,
    prompt: RenderedPrompt | str,
    *,
    sleep: Callable[[float], Awaitable[Any]] = asyncio.sleep,
    on_attempt: Callable[[int], None] | None = None,
) -> GenerateExchange:
    """Send one prompt and return the full completion.

    Timeouts, transport failures and 5xx responses are retried up to
    ``max_retries`` times with exponential backoff; 4xx and malformed bodies
    fail immediately.
    """
    text = prompt.text if isinstance(prompt, RenderedPrompt) else prompt
    body = {"model": config.model_id, "prompt": text, "stream": False}
    started = time.perf_counter()
    delays: list[float] = []
    attempt = 0
    while True:
        attempt += 1
        if on_attempt is not None:
            on_attempt(attempt)
        try:
            completion = await _post_once(config, body)
        except RETRYABLE as exc:
            if attempt > config.max_retries:
                exc.attempts = attempt
                exc.backoff_ms = delays
                exc.duration_ms = (time.perf_counter() - started) * 1000
                raise
            delay = config.backoff_ms(attempt - 1)
            delays.append(delay)
            await sleep(delay / 1000)
        except BackendError as exc:
            exc.attempts = attempt
            exc.backoff_ms = delays
            exc.duration_ms = (time.perf_counter() - started) * 1000
            raise
        else:
            return GenerateExchange(
                backend=config.name,
                request=body,
                text=completion,
                duration_ms=(time.perf_counter() - started) * 1000,
                attempts=attempt,
                backoff_ms=delays,
            )


@dataclass(frozen=True)
class HealthStatus:
    healthy: bool
    reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"healthy": self.healthy, "reason": self.reason}


async def health_check(config: BackendConfig) -> HealthStatus:
    """Single probe of the model-list endpoint. Never retries, never raises."""
    timeout_s = min(config.timeout_ms, HEALTH_TIMEOUT_MS) / 1000
    try:
        async with _client(timeout_s) as http:
            resp = await asyncio.wait_for(http.get(f"{config.base_url}/api/tags"), timeout_s)
    except (asyncio.TimeoutError, httpx.TimeoutException):
        return HealthStatus(False, BackendTimeout.kind)
    except httpx.TransportError:
        return HealthStatus(False, ConnectionFailed.kind)
    if resp.status_code >= 500:
        return HealthStatus(False, f"{ServerError.kind}: HTTP {resp.status_code}")
    if resp.status_code >= 300:
        return HealthStatus(False, f"{ClientError.kind}: HTTP {resp.status_code}")
    try:
        payload = resp.json()
    except ValueError:
        payload = None
    if not isinstance(payload, dict) or not isinstance(payload.get("models"), list):
        return HealthStatus(False, MalformedResponse.kind)
    return HealthStatus(True)


async def dispatch(
    jobs: Sequence[tuple[BackendConfig, RenderedPrompt]],
    deadline_s: float,
) -> Mapping[str, GenerateExchange | BackendError]:
    """Run every job concurrently under one shared deadline.

    A member that is still running at the deadline is cancelled and reported
    as BackendTimeout; other members' results are unaffected.
    """
    attempts: dict[str, int] = {cfg.name: 0 for cfg, _ in jobs}

    def counter(name: str) -> Callable[[int], None]:
        return lambda n: attempts.__setitem__(name, n)

    tasks = {
        asyncio.ensure_future(generate(cfg, prompt, on_attempt=counter(cfg.name))): cfg
        for cfg, prompt in jobs
    }
    if not tasks:
        return {}
    done, pending = await asyncio.wait(list(tasks), timeout=deadline_s)
    for task in pending:
        task.cancel()
    if pending:
        await asyncio.gather(*pending, return_exceptions=True)

    results: dict[str, GenerateExchange | BackendError] = {}
    for task, cfg in tasks.items():
        if task in pending:
            err = BackendTimeout(
                f"cancelled at shared deadline of {deadline_s * 1000:.0f} ms",
                backend=cfg.name,
                attempts=attempts[cfg.name],
            )
            err.duration_ms = deadline_s * 1000
            results[cfg.name] = err
            continue
        exc = task.exception()
        if exc is None:
            results[cfg.name] = task.result()
        elif isinstance(exc, BackendError):
            results[cfg.name] = exc
        else:
            err = BackendError(f"{type(exc).__name__}: {exc}", backend=cfg.name, attempts=attempts[cfg.name])
            results[cfg.name] = err
    return {cfg.name: results[cfg.name] for cfg, _ in jobs}
