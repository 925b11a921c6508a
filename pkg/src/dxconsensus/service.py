"""End-to-end diagnose pipeline and its HTTP surface.

Endpoints::

    POST /v1/diagnose      {"transcript": [{"speaker", "text"}, ...],
                            "options": {"mode", "diagnostic_template", "adjudication_template"}}
    GET  /v1/audit/{id}    stored record plus {"chain": {...}}
    GET  /v1/models        per-backend health, role and model id
    GET  /v1/health        {"status": "ok"}

Diagnose answers 200 with a decision, 422 when every member abstained, 503
when no member could be reached and 400 for an invalid request. Each of
these is written to the audit log before the response goes out.
"""

from __future__ import annotations

import asyncio
import logging
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, AsyncIterator, Literal, Sequence

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .audit import AuditLog
from .backend import BackendConfig, BackendError, GenerateExchange, dispatch, health_check
from .catalog import Catalog, default_catalog
from .config import ServiceConfig
from .consensus import (
    AdjudicationTrace,
    ConsensusOutcome,
    ModelPrediction,
    decide_adjudicated,
    decide_deterministic,
    failed_prediction,
    parse_prediction,
    resolve_adjudication,
)
from .prompts import (
    PromptError,
    RenderedPrompt,
    TemplateLibrary,
    UnknownTemplate,
    render_diagnostic,
)
from .transcript import ConversationTurn, InvalidTranscript, check_transcript, parse_turns

log = logging.getLogger(__name__)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class DiagnoseResult:
    status_code: int
    predictions: list[ModelPrediction]
    outcome: ConsensusOutcome
    audit_id: str
    timing_ms: dict[str, float | None]
    error: str | None = None
    record: dict[str, Any] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, Any]:
        body = {
            "audit_id": self.audit_id,
            "predictions": [p.to_dict() for p in self.predictions],
            "outcome": self.outcome.to_dict(),
            "timing_ms": self.timing_ms,
        }
        if self.error:
            body["error"] = self.error
        return body


class Orchestrator:
    """Wires prompts, backends, consensus and the audit log for one fleet.

    Everything that can be wrong with the configuration (templates that do not
    resolve, duplicate names) is rejected here, at construction.
    """

    def __init__(
        self,
        config: ServiceConfig,
        *,
        audit: AuditLog | None = None,
        library: TemplateLibrary | None = None,
        catalog: Catalog | None = None,
    ) -> None:
        self.config = config
        self.library = library or TemplateLibrary.load(config.templates.dirs)
        self.catalog = default_catalog() if catalog is None else catalog
        self.audit = audit or AuditLog(config.audit_path)
        self.config_digest = config.digest()
        self.library.diagnostic(config.templates.diagnostic)
        self.library.adjudication(config.templates.adjudication)
        for member in config.fleet:
            if member.prompt_template:
                self.library.diagnostic(member.prompt_template)

    def _diagnostic_template_for(self, member: BackendConfig, override: str | None) -> str:
        return override or member.prompt_template or self.config.templates.diagnostic

    def render_member_prompts(
        self, turns: Sequence[ConversationTurn], override: str | None = None
    ) -> dict[str, RenderedPrompt]:
        rendered: dict[str, RenderedPrompt] = {}
        by_template: dict[str, RenderedPrompt] = {}
        for member in self.config.fleet:
            tid = self._diagnostic_template_for(member, override)
            if tid not in by_template:
                by_template[tid] = render_diagnostic(
                    turns,
                    self.library.diagnostic(tid),
                    max_chars=self.config.limits.max_prompt_chars,
                )
            rendered[member.name] = by_template[tid]
        return rendered

    async def diagnose(
        self,
        turns: Sequence[ConversationTurn],
        *,
        mode: str | None = None,
        diagnostic_template: str | None = None,
        adjudication_template: str | None = None,
    ) -> DiagnoseResult:
        """Run one transcript through the fleet.

        Raises InvalidTranscript or a PromptError for bad input; backend
        failures never raise and show up as abstentions instead.
        """
        limits = self.config.limits
        check_transcript(turns, limits.max_transcript_turns)
        mode = mode or self.config.mode
        adjudication_tpl = self.library.adjudication(
            adjudication_template or self.config.templates.adjudication
        )
        started_at = _now()
        t0 = time.monotonic()
        deadline_s = limits.request_deadline_ms / 1000

        prompts = self.render_member_prompts(turns, diagnostic_template)
        jobs = [(m, prompts[m.name]) for m in self.config.fleet]
        results = await dispatch(jobs, deadline_s)

        predictions: list[ModelPrediction] = []
        timing: dict[str, float | None] = {}
        for member in self.config.fleet:
            res = results[member.name]
            if isinstance(res, GenerateExchange):
                predictions.append(parse_prediction(member.name, res.text, self.catalog))
                timing[member.name] = round(res.duration_ms, 3)
            else:
                predictions.append(failed_prediction(member.name, res.describe()))
                timing[member.name] = None if res.duration_ms is None else round(res.duration_ms, 3)

        status_code, error = 200, None
        if all(p.error for p in predictions):
            status_code, error = 503, "no consortium member reachable"
            outcome = decide_deterministic(predictions)
        elif all(p.abstained for p in predictions):
            status_code, error = 422, "every consortium member abstained"
            outcome = decide_deterministic(predictions)
        elif mode == "adjudicate" and self.config.adjudicator is not None and len(predictions) >= 2:
            remaining = max(deadline_s - (time.monotonic() - t0), 0.001)
            outcome = await decide_adjudicated(
                predictions,
                self.config.adjudicator,
                adjudication_tpl,
                catalog=self.catalog,
                rationale_budget=limits.rationale_budget,
                deadline_s=remaining,
            )
            trace = outcome.adjudication
            if trace is not None:
                timing[trace.adjudicator] = round(trace.duration_ms, 3) if trace.response_text is not None else None
        else:
            outcome = decide_deterministic(predictions)

        record = self._audit_body(turns, mode, prompts, results, predictions, outcome, status_code)
        record["started_at"] = started_at
        record["finished_at"] = _now()
        stored = self.audit.append(record)
        return DiagnoseResult(
            status_code, predictions, outcome, stored["audit_id"], timing, error, stored
        )

    def _audit_body(
        self,
        turns: Sequence[ConversationTurn],
        mode: str,
        prompts: dict[str, RenderedPrompt],
        results: Any,
        predictions: list[ModelPrediction],
        outcome: ConsensusOutcome,
        status_code: int,
    ) -> dict[str, Any]:
        prompt_rows = []
        response_rows = []
        for member in self.config.fleet:
            p = prompts[member.name]
            prompt_rows.append(
                {"backend": member.name, "role": member.role.value, "template_id": p.template_id,
                 "digest": p.digest, "text": p.text}
            )
            res = results[member.name]
            if isinstance(res, BackendError):
                response_rows.append({"backend": member.name, "text": None, "error": res.describe(),
                                      "attempts": res.attempts})
            else:
                response_rows.append({"backend": member.name, "text": res.text, "error": None,
                                      "attempts": res.attempts})
        trace = outcome.adjudication
        if trace is not None:
            prompt_rows.append(
                {"backend": trace.adjudicator, "role": "adjudicator", "template_id": trace.prompt.template_id,
                 "digest": trace.prompt.digest, "text": trace.prompt.text}
            )
            response_rows.append({"backend": trace.adjudicator, "text": trace.response_text,
                                  "error": trace.error, "attempts": trace.attempts})
        return {
            "kind": "diagnose",
            "http_status": status_code,
            "mode": mode,
            "decision_path": "adjudicator" if trace is not None else "deterministic",
            "config_digest": self.config_digest,
            "transcript": [t.to_dict() for t in turns],
            "prompts": prompt_rows,
            "responses": response_rows,
            "predictions": [p.to_dict() for p in predictions],
            "outcome": outcome.to_dict(),
        }

    async def fleet_status(self) -> list[dict[str, Any]]:
        backends = list(self.config.fleet)
        if self.config.adjudicator is not None:
            backends.append(self.config.adjudicator)
        statuses = await asyncio.gather(*(health_check(b) for b in backends))
        return [
            {"name": b.name, "role": b.role.value, "model_id": b.model_id, "base_url": b.base_url,
             **s.to_dict()}
            for b, s in zip(backends, statuses)
        ]

    async def replay(self, record: dict[str, Any]) -> dict[str, Any]:
        """Resend an audited request's member prompts and decide again."""
        members = {m.name: m for m in self.config.fleet}
        jobs = [
            (members[row["backend"]], RenderedPrompt(row["template_id"], row["text"]))
            for row in record["prompts"]
            if row["role"] == "consortium_member"
        ]
        results = await dispatch(jobs, self.config.limits.request_deadline_ms / 1000)
        predictions = [
            parse_prediction(name, res.text, self.catalog)
            if isinstance(res, GenerateExchange)
            else failed_prediction(name, res.describe())
            for name, res in results.items()
        ]
        if record["decision_path"] == "adjudicator" and self.config.adjudicator is not None:
            outcome = await decide_adjudicated(
                predictions,
                self.config.adjudicator,
                self.library.adjudication(self.config.templates.adjudication),
                catalog=self.catalog,
                rationale_budget=self.config.limits.rationale_budget,
            )
        else:
            outcome = decide_deterministic(predictions)
        return outcome.to_dict()


def reconstruct_outcome(record: dict[str, Any], catalog: Catalog | None = None) -> dict[str, Any]:
    """Recompute a stored decision from the audit record alone, offline."""
    member_rows = [
        (p, r) for p, r in zip(record["prompts"], record["responses"]) if p["role"] == "consortium_member"
    ]
    predictions = [
        failed_prediction(r["backend"], r["error"]) if r["error"] else parse_prediction(r["backend"], r["text"], catalog)
        for _, r in member_rows
    ]
    if record["decision_path"] == "adjudicator":
        p_row = next(p for p in record["prompts"] if p["role"] == "adjudicator")
        r_row = next(r for r in record["responses"] if r["backend"] == p_row["backend"])
        trace = AdjudicationTrace(
            p_row["backend"],
            RenderedPrompt(p_row["template_id"], p_row["text"], p_row["digest"]),
            response_text=r_row["text"],
            attempts=r_row["attempts"],
            error=r_row["error"],
        )
        return resolve_adjudication(predictions, trace, catalog).to_dict()
    return decide_deterministic(predictions).to_dict()


# --- HTTP layer ----------------------------------------------------------------


class TurnIn(BaseModel):
    model_config = ConfigDict(extra="forbid")
    speaker: str
    text: str


class DiagnoseOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mode: Literal["adjudicate", "deterministic"] | None = None
    diagnostic_template: str | None = None
    adjudication_template: str | None = None


class DiagnoseRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    transcript: list[TurnIn]
    options: DiagnoseOptions = DiagnoseOptions()


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: ServiceConfig, orchestrator: Orchestrator | None = None) -> FastAPI:
    orch = orchestrator or Orchestrator(config)
    limit = config.limits.max_concurrent_diagnoses

    @asynccontextmanager
    async def lifespan(app: FastAPI) -> AsyncIterator[None]:
        app.state.slots = asyncio.Semaphore(limit)
        yield

    app = FastAPI(title="dxconsensus", lifespan=lifespan)
    app.state.orchestrator = orch

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        return _error(400, f"invalid request: {exc.errors()[:3]}")

    @app.post("/v1/diagnose")
    async def diagnose(req: DiagnoseRequest) -> JSONResponse:
        try:
            turns = parse_turns(t.model_dump() for t in req.transcript)
        except InvalidTranscript as exc:
            return _error(400, f"invalid transcript: {exc}")
        opts = req.options
        async with app.state.slots:
            try:
                result = await orch.diagnose(
                    turns,
                    mode=opts.mode,
                    diagnostic_template=opts.diagnostic_template,
                    adjudication_template=opts.adjudication_template,
                )
            except InvalidTranscript as exc:
                return _error(400, f"invalid transcript: {exc}")
            except UnknownTemplate as exc:
                return _error(400, str(exc))
            except PromptError as exc:
                return _error(400, f"cannot build prompt: {exc}")
        return JSONResponse(status_code=result.status_code, content=result.to_dict())

    @app.get("/v1/audit/{audit_id}")
    async def audit(audit_id: str) -> JSONResponse:
        record = orch.audit.get(audit_id)
        if record is None:
            return _error(404, f"no audit record {audit_id}")
        return JSONResponse({**record, "chain": orch.audit.verify().to_dict()})

    @app.get("/v1/models")
    async def models() -> JSONResponse:
        return JSONResponse({"backends": await orch.fleet_status()})

    @app.get("/v1/health")
    async def health() -> dict[str, str]:
        return {"status": "ok"}

    return app


def run(config: ServiceConfig) -> None:
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
