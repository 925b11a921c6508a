"""Prompt templates and rendering for consortium members and the adjudicator.

Template files are UTF-8 text split into ``@section`` blocks. Lines starting
with ``#`` before the first section are comments. ``@body`` must come last and
is taken verbatim; it may use ``{{placeholder}}`` slots. The allowed slots per
template kind are fixed, and anything else is rejected when the file loads::

    @id diagnostic-default
    @kind diagnostic
    @preamble
    ...
    @cues
    Heading | instruction
    @output_contract
    ... Diagnosis: <DSM-5 code> <label> ...
    @body
    {{preamble}} {{transcript}} {{cues}} {{output_contract}}

Adjudication templates carry ``@preamble``, ``@block`` (slots ``name``, ``code``,
``label``, ``status``, ``rationale``), ``@decision_instruction`` and a body
using ``{{preamble}}``, ``{{model_blocks}}`` and ``{{decision_instruction}}``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from .transcript import ConversationTurn, Transcript

if TYPE_CHECKING:
    from .consensus import ModelPrediction

DEFAULT_DIAGNOSTIC_TEMPLATE = "diagnostic-default"
DEFAULT_ADJUDICATION_TEMPLATE = "adjudication-default"
DEFAULT_MAX_PROMPT_CHARS = 24_000
DEFAULT_RATIONALE_BUDGET = 1_200

_SLOT_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")

DIAGNOSTIC_SLOTS = frozenset({"preamble", "transcript", "cues", "output_contract"})
ADJUDICATION_SLOTS = frozenset({"preamble", "model_blocks", "decision_instruction"})
BLOCK_SLOTS = frozenset({"name", "code", "label", "status", "rationale"})


class PromptError(Exception):
    pass


class TemplateError(PromptError, ValueError):
    """Template file is malformed or uses an unknown placeholder."""


class UnknownTemplate(PromptError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown template"


class EmptyTranscript(PromptError, ValueError):
    pass


class PromptOverflow(PromptError, ValueError):
    pass


class TooFewPredictions(PromptError, ValueError):
    pass


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RenderedPrompt:
    template_id: str
    text: str
    digest: str = ""

    def __post_init__(self) -> None:
        expected = sha256_hex(self.text)
        if not self.digest:
            object.__setattr__(self, "digest", expected)
        elif self.digest != expected:
            raise ValueError("prompt digest does not match text")


@dataclass(frozen=True)
class CueSection:
    heading: str
    instruction: str = ""

    def render(self) -> str:
        if self.instruction:
            return f"### {self.heading}\n{self.instruction}"
        return f"### {self.heading}"


@dataclass(frozen=True)
class DiagnosticPromptTemplate:
    id: str
    preamble: str
    cue_sections: tuple[CueSection, ...]
    output_contract: str
    body: str

    def __post_init__(self) -> None:
        if not self.cue_sections:
            raise TemplateError(f"{self.id}: at least one cue section is required")
        if "DSM-5" not in self.output_contract:
            raise TemplateError(f"{self.id}: output contract must mention DSM-5")
        _check_slots(self.id, self.body, DIAGNOSTIC_SLOTS)


@dataclass(frozen=True)
class AdjudicationPromptTemplate:
    id: str
    context_preamble: str
    block_format: str
    decision_instruction: str
    body: str

    def __post_init__(self) -> None:
        _check_slots(self.id, self.body, ADJUDICATION_SLOTS)
        _check_slots(self.id, self.block_format, BLOCK_SLOTS)
        if "model_blocks" not in _slots(self.body):
            raise TemplateError(f"{self.id}: body must place {{{{model_blocks}}}}")


PromptTemplate = DiagnosticPromptTemplate | AdjudicationPromptTemplate


def _slots(text: str) -> set[str]:
    return set(_SLOT_RE.findall(text))


def _check_slots(template_id: str, text: str, allowed: frozenset[str]) -> None:
    unknown = _slots(text) - allowed
    if unknown:
        raise TemplateError(f"{template_id}: unknown placeholder(s) {sorted(unknown)}")


def _substitute(text: str, values: dict[str, str]) -> str:
    # Single pass: substituted values are never rescanned for slots.
    return _SLOT_RE.sub(lambda m: values[m.group(1)], text)


def parse_template(text: str) -> PromptTemplate:
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        if current == "body":
            sections["body"].append(line)
            continue
        if line.startswith("@"):
            name, _, inline = line[1:].partition(" ")
            if not name or name in sections:
                raise TemplateError(f"empty or repeated section @{name}")
            current = name
            sections[name] = [inline] if inline.strip() else []
        elif current is None:
            if line.strip() and not line.startswith("#"):
                raise TemplateError("content before first @section")
        else:
            sections[current].append(line)

    def get(name: str) -> str:
        if name not in sections:
            raise TemplateError(f"missing @{name} section")
        return "\n".join(sections[name]).strip("\n")

    kind = get("kind").strip()
    template_id = get("id").strip()
    if kind == "diagnostic":
        known = {"id", "kind", "preamble", "cues", "output_contract", "body"}
    elif kind == "adjudication":
        known = {"id", "kind", "preamble", "block", "decision_instruction", "body"}
    else:
        raise TemplateError(f"{template_id}: unknown template kind {kind!r}")
    extra = set(sections) - known
    if extra:
        raise TemplateError(f"{template_id}: unknown section(s) {sorted(extra)}")
    for name in known - {"body", "block"}:
        _check_slots(template_id, get(name), frozenset())

    if kind == "diagnostic":
        cues = []
        for line in get("cues").splitlines():
            if not line.strip():
                continue
            heading, _, instruction = line.partition("|")
            cues.append(CueSection(heading.strip(), instruction.strip()))
        return DiagnosticPromptTemplate(
            id=template_id,
            preamble=get("preamble"),
            cue_sections=tuple(cues),
            output_contract=get("output_contract"),
            body=get("body"),
        )
    return AdjudicationPromptTemplate(
        id=template_id,
        context_preamble=get("preamble"),
        block_format=get("block"),
        decision_instruction=get("decision_instruction"),
        body=get("body"),
    )


def load_template(path: str | Path) -> PromptTemplate:
    return parse_template(Path(path).read_text(encoding="utf-8"))


class TemplateLibrary:
    """Templates by id: the packaged defaults plus any extra directories."""

    def __init__(self, templates: Iterable[PromptTemplate] = ()) -> None:
        self._templates: dict[str, PromptTemplate] = {}
        for t in templates:
            self.add(t)

    def add(self, template: PromptTemplate) -> None:
        if template.id in self._templates:
            raise TemplateError(f"duplicate template id {template.id}")
        self._templates[template.id] = template

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._templates

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise UnknownTemplate(f"no template with id {template_id!r}") from None

    def diagnostic(self, template_id: str = DEFAULT_DIAGNOSTIC_TEMPLATE) -> DiagnosticPromptTemplate:
        t = self.get(template_id)
        if not isinstance(t, DiagnosticPromptTemplate):
            raise UnknownTemplate(f"{template_id!r} is not a diagnostic template")
        return t

    def adjudication(
        self, template_id: str = DEFAULT_ADJUDICATION_TEMPLATE
    ) -> AdjudicationPromptTemplate:
        t = self.get(template_id)
        if not isinstance(t, AdjudicationPromptTemplate):
            raise UnknownTemplate(f"{template_id!r} is not an adjudication template")
        return t

    @classmethod
    def load(cls, extra_dirs: Iterable[str | Path] = ()) -> "TemplateLibrary":
        lib = cls()
        builtin = resources.files("dxconsensus").joinpath("data/templates")
        for entry in sorted(builtin.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".tmpl"):
                lib.add(parse_template(entry.read_text("utf-8")))
        for d in extra_dirs:
            for path in sorted(Path(d).glob("*.tmpl")):
                lib.add(load_template(path))
        return lib


_default_library: TemplateLibrary | None = None


def default_library() -> TemplateLibrary:
    global _default_library
    if _default_library is None:
        _default_library = TemplateLibrary.load()
    return _default_library


def render_cues(template: DiagnosticPromptTemplate) -> str:
    return "\n\n".join(c.render() for c in template.cue_sections)


def render_diagnostic(
    transcript: Transcript,
    template: DiagnosticPromptTemplate | None = None,
    *,
    max_chars: int = DEFAULT_MAX_PROMPT_CHARS,
    truncate: bool = True,
) -> RenderedPrompt:
    """Render the per-model prompt for one conversation.

    When the text exceeds ``max_chars`` the oldest turns are dropped and
    replaced by a ``[TRUNCATED k TURNS]`` marker; with ``truncate=False`` an
    oversize prompt raises PromptOverflow instead.
    """
    template = template or default_library().diagnostic()
    turns: list[ConversationTurn] = list(transcript)
    if not turns:
        raise EmptyTranscript("cannot render a prompt for an empty transcript")

    values = {
        "preamble": template.preamble,
        "cues": render_cues(template),
        "output_contract": template.output_contract,
    }

    def build(dropped: int) -> str:
        lines = [t.render() for t in turns[dropped:]]
        if dropped:
            lines.insert(0, f"[TRUNCATED {dropped} TURNS]")
        return _substitute(template.body, {**values, "transcript": "\n".join(lines)})

    text = build(0)
    if len(text) <= max_chars:
        return RenderedPrompt(template.id, text)
    if not truncate:
        raise PromptOverflow(f"prompt is {len(text)} chars, limit is {max_chars}")
    for dropped in range(1, len(turns)):
        text = build(dropped)
        if len(text) <= max_chars:
            return RenderedPrompt(template.id, text)
    raise PromptOverflow(f"prompt exceeds {max_chars} chars even with one turn left")


def rationale_excerpt(text: str, budget: int = DEFAULT_RATIONALE_BUDGET) -> str:
    text = text.strip()
    if len(text) <= budget:
        return text
    return text[:budget].rstrip() + " [...]"


def render_model_block(
    template: AdjudicationPromptTemplate,
    prediction: "ModelPrediction",
    rationale_budget: int = DEFAULT_RATIONALE_BUDGET,
) -> str:
    primary = prediction.primary_code
    if prediction.error:
        rationale = f"(backend error: {prediction.error})"
    else:
        rationale = rationale_excerpt(prediction.raw_text, rationale_budget) or "(empty response)"
    return _substitute(
        template.block_format,
        {
            "name": prediction.backend_name,
            "code": primary.code if primary else "none",
            "label": primary.label if primary else "no catalogued diagnosis",
            "status": prediction.parse_status.value,
            "rationale": rationale,
        },
    )


def render_adjudication(
    predictions: Sequence["ModelPrediction"],
    template: AdjudicationPromptTemplate | None = None,
    *,
    rationale_budget: int = DEFAULT_RATIONALE_BUDGET,
) -> RenderedPrompt:
    template = template or default_library().adjudication()
    if len(predictions) < 2:
        raise TooFewPredictions(f"adjudication needs at least 2 predictions, got {len(predictions)}")
    ordered = sorted(predictions, key=lambda p: p.backend_name)
    blocks = "\n\n".join(render_model_block(template, p, rationale_budget) for p in ordered)
    text = _substitute(
        template.body,
        {
            "preamble": template.context_preamble,
            "model_blocks": blocks,
            "decision_instruction": template.decision_instruction,
        },
    )
    return RenderedPrompt(template.id, text)


def render_instruction(template: DiagnosticPromptTemplate) -> str:
    """Transcript-free instruction text, used for fine-tune samples."""
    return "\n\n".join([template.preamble, render_cues(template), template.output_contract])
