"""Turn consortium outputs into a final diagnosis."""

from __future__ import annotations

import asyncio
import enum
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

from .catalog import Catalog, CodeCandidate, DsmCode, default_catalog
from .prompts import (
    AdjudicationPromptTemplate,
    RenderedPrompt,
    TooFewPredictions,
    render_adjudication,
)


class ParseStatus(str, enum.Enum):
    OK = "ok"
    NO_CODE_FOUND = "no_code_found"
    UNCATALOGUED_CODE = "uncatalogued_code"
    BACKEND_ERROR = "backend_error"


class DecisionStatus(str, enum.Enum):
    UNANIMOUS = "unanimous"
    MAJORITY = "majority"
    ADJUDICATED = "adjudicated"
    UNDETERMINED = "undetermined"


@dataclass(frozen=True)
class ModelPrediction:
    backend_name: str
    raw_text: str
    extracted_codes: tuple[CodeCandidate, ...] = ()
    primary_code: DsmCode | None = None
    parse_status: ParseStatus = ParseStatus.NO_CODE_FOUND
    error: str | None = None

    @property
    def abstained(self) -> bool:
        return self.primary_code is None

    @property
    def uncatalogued(self) -> list[str]:
        return [c.code for c in self.extracted_codes if not c.catalogued]

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend": self.backend_name,
            "raw_text": self.raw_text,
            "extracted_codes": [
                {"code": c.code, "catalogued": c.catalogued} for c in self.extracted_codes
            ],
            "primary_code": _code_dict(self.primary_code),
            "parse_status": self.parse_status.value,
            "error": self.error,
        }


def _code_dict(code: DsmCode | None) -> dict[str, str] | None:
    if code is None:
        return None
    return {"code": code.code, "label": code.label, "category": code.category}


def parse_prediction(
    backend_name: str, raw_text: str, catalog: Catalog | None = None
) -> ModelPrediction:
    catalog = default_catalog() if catalog is None else catalog
    candidates = tuple(catalog.extract_codes(raw_text))
    primary = next((c.entry for c in candidates if c.entry is not None), None)
    if not candidates:
        status = ParseStatus.NO_CODE_FOUND
    elif any(not c.catalogued for c in candidates):
        status = ParseStatus.UNCATALOGUED_CODE
    else:
        status = ParseStatus.OK
    return ModelPrediction(backend_name, raw_text, candidates, primary, status)


def failed_prediction(backend_name: str, error: str) -> ModelPrediction:
    """A member whose call failed; it counts as an abstention."""
    return ModelPrediction(backend_name, "", (), None, ParseStatus.BACKEND_ERROR, error)


@dataclass(frozen=True)
class Tally:
    votes: dict[str, int]
    abstentions: int

    @property
    def total(self) -> int:
        return sum(self.votes.values()) + self.abstentions


def tally(predictions: Sequence[ModelPrediction]) -> Tally:
    if not predictions:
        raise ValueError("tally needs at least one prediction")
    votes = Counter(p.primary_code.code for p in predictions if p.primary_code is not None)
    abstentions = sum(1 for p in predictions if p.primary_code is None)
    return Tally(dict(sorted(votes.items())), abstentions)


@dataclass
class AdjudicationTrace:
    adjudicator: str
    prompt: RenderedPrompt
    response_text: str | None = None
    attempts: int = 0
    duration_ms: float = 0.0
    error: str | None = None


@dataclass
class ConsensusOutcome:
    final_code: DsmCode | None
    status: DecisionStatus
    agreement_ratio: Fraction
    supporting_models: list[str] = field(default_factory=list)
    candidates: list[str] = field(default_factory=list)
    adjudicator_rationale: str | None = None
    adjudicator_override: bool = False
    degraded: str | None = None
    adjudication: AdjudicationTrace | None = None

    def __post_init__(self) -> None:
        if self.status is DecisionStatus.UNANIMOUS and self.agreement_ratio != 1:
            raise ValueError("unanimous outcome must have agreement ratio 1")
        if self.status is DecisionStatus.MAJORITY and not self.agreement_ratio > Fraction(1, 2):
            raise ValueError("majority outcome must have agreement ratio above 1/2")
        if self.status is DecisionStatus.UNDETERMINED and self.final_code is not None:
            raise ValueError("undetermined outcome cannot carry a final code")

    def to_dict(self) -> dict[str, Any]:
        return {
            "final_code": _code_dict(self.final_code),
            "status": self.status.value,
            "agreement_ratio": str(self.agreement_ratio),
            "supporting_models": list(self.supporting_models),
            "candidates": list(self.candidates),
            "adjudicator_rationale": self.adjudicator_rationale,
            "adjudicator_override": self.adjudicator_override,
            "degraded": self.degraded,
        }


def decide_deterministic(predictions: Sequence[ModelPrediction]) -> ConsensusOutcome:
    """Vote without an adjudicator.

    Abstentions stay in the denominator: a winner needs strictly more than
    half of *all* predictions. Unanimity means every prediction names the
    same code. Ties are reported as undetermined with the tied codes listed.
    """
    counts = tally(predictions)
    n = len(predictions)
    if not counts.votes:
        return ConsensusOutcome(None, DecisionStatus.UNDETERMINED, Fraction(0))
    top = max(counts.votes.values())
    leaders = sorted(code for code, c in counts.votes.items() if c == top)
    ratio = Fraction(top, n)
    if len(leaders) == 1 and 2 * top > n:
        winner = leaders[0]
        final = next(p.primary_code for p in predictions if p.primary_code and p.primary_code.code == winner)
        status = DecisionStatus.UNANIMOUS if top == n else DecisionStatus.MAJORITY
        return ConsensusOutcome(final, status, ratio, _supporters(predictions, winner), leaders)
    return ConsensusOutcome(None, DecisionStatus.UNDETERMINED, ratio, [], leaders)


def _supporters(predictions: Sequence[ModelPrediction], code: str) -> list[str]:
    return sorted(
        p.backend_name for p in predictions if p.primary_code and p.primary_code.code == code
    )


def final_code_from_adjudicator(text: str, catalog: Catalog | None = None) -> DsmCode | None:
    """Last catalogued code in the text; reasoning restates candidates before concluding."""
    catalog = default_catalog() if catalog is None else catalog
    found = [c.entry for c in catalog.scan_codes(text) if c.entry is not None]
    return found[-1] if found else None


def resolve_adjudication(
    predictions: Sequence[ModelPrediction],
    trace: AdjudicationTrace,
    catalog: Catalog | None = None,
) -> ConsensusOutcome:
    """Outcome from an adjudicator exchange, falling back to voting on failure.

    Pure: the same predictions and trace always give the same outcome, so an
    audit record alone is enough to reconstruct the decision.
    """
    final = None
    if trace.error is None and trace.response_text is not None:
        final = final_code_from_adjudicator(trace.response_text, catalog)
    if final is None:
        reason = trace.error or "adjudicator response contained no catalogued DSM-5 code"
        outcome = decide_deterministic(predictions)
        note = f"adjudicator {trace.adjudicator} unavailable ({reason}); deterministic fallback"
        outcome.degraded = note
        outcome.adjudicator_rationale = (
            f"{note}\n\n{trace.response_text}" if trace.response_text else note
        )
        outcome.adjudication = trace
        return outcome
    primaries = {p.primary_code.code for p in predictions if p.primary_code is not None}
    supporters = _supporters(predictions, final.code)
    counts = tally(predictions)
    return ConsensusOutcome(
        final_code=final,
        status=DecisionStatus.ADJUDICATED,
        agreement_ratio=Fraction(len(supporters), len(predictions)),
        supporting_models=supporters,
        candidates=sorted(counts.votes),
        adjudicator_rationale=trace.response_text,
        adjudicator_override=final.code not in primaries,
        adjudication=trace,
    )


async def decide_adjudicated(
    predictions: Sequence[ModelPrediction],
    adjudicator: Any,
    template: AdjudicationPromptTemplate | None = None,
    *,
    catalog: Catalog | None = None,
    rationale_budget: int | None = None,
    deadline_s: float | None = None,
) -> ConsensusOutcome:
    """Ask the adjudicator backend for the final code.

    ``adjudicator`` is a BackendConfig with role ``adjudicator``. Any backend
    error, or a reply without a catalogued code, degrades to voting and the
    degradation is recorded on the outcome. ``deadline_s`` caps the whole
    call including retries.
    """
    from .backend import BackendError, Role, generate

    if len(predictions) < 2:
        raise TooFewPredictions(f"adjudication needs at least 2 predictions, got {len(predictions)}")
    if adjudicator.role is not Role.ADJUDICATOR:
        raise ValueError(f"backend {adjudicator.name} is not configured as an adjudicator")
    kwargs = {} if rationale_budget is None else {"rationale_budget": rationale_budget}
    prompt = render_adjudication(predictions, template, **kwargs)
    trace = AdjudicationTrace(adjudicator.name, prompt)
    attempts = 0

    def count(n: int) -> None:
        nonlocal attempts
        attempts = n

    try:
        exchange = await asyncio.wait_for(generate(adjudicator, prompt, on_attempt=count), deadline_s)
    except BackendError as exc:
        trace.error = exc.describe()
        trace.attempts = exc.attempts
    except asyncio.TimeoutError:
        trace.error = "timeout: request deadline exceeded"
        trace.attempts = attempts
    else:
        trace.response_text = exchange.text
        trace.attempts = exchange.attempts
        trace.duration_ms = exchange.duration_ms
    return resolve_adjudication(predictions, trace, catalog)
