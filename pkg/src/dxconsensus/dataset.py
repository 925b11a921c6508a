"""Annotated conversation records -> fine-tune JSONL splits."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence, TypeVar

from .catalog import Catalog, CatalogError, DsmCode, MalformedCode, default_catalog
from .prompts import (
    DEFAULT_DIAGNOSTIC_TEMPLATE,
    TemplateLibrary,
    default_library,
    render_instruction,
)
from .transcript import (
    ConversationTurn,
    InvalidTranscript,
    check_transcript,
    parse_turns,
    render_transcript,
)

T = TypeVar("T")

SAMPLE_FIELDS = ("instruction", "content", "text")


class DatasetError(Exception):
    pass


class UnreadableSource(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class UnwritableTarget(DatasetError):
    pass


@dataclass(frozen=True)
class RawRecord:
    id: str
    turns: tuple[ConversationTurn, ...]
    clinician_reasoning: str
    gold_diagnosis: DsmCode

    def __post_init__(self) -> None:
        check_transcript(self.turns)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "turns": [t.to_dict() for t in self.turns],
            "reasoning": self.clinician_reasoning,
            "diagnosis_code": self.gold_diagnosis.code,
        }


@dataclass(frozen=True)
class FineTuneSample:
    instruction: str
    content: str
    text: str

    def __post_init__(self) -> None:
        for name in SAMPLE_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"fine-tune sample field {name!r} is empty")

    def to_json(self) -> str:
        return json.dumps(
            {"instruction": self.instruction, "content": self.content, "text": self.text},
            ensure_ascii=False,
        )


@dataclass(frozen=True)
class Reject:
    line: int
    id: str | None
    reason: str


@dataclass
class IngestResult:
    records: list[RawRecord]
    rejects: list[Reject]


def parse_record(obj: Any, catalog: Catalog) -> RawRecord:
    """Validate one decoded input object; raises ValueError with a reject reason."""
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    rid = obj.get("id")
    if rid is None or (isinstance(rid, str) and not rid.strip()):
        raise ValueError("missing id")
    code = obj.get("diagnosis_code")
    if code is None or (isinstance(code, str) and not code.strip()):
        raise ValueError("missing gold_diagnosis")
    if not isinstance(code, str):
        raise ValueError("malformed gold_diagnosis")
    try:
        gold = catalog.validate_code(code)
    except MalformedCode:
        raise ValueError("malformed gold_diagnosis") from None
    except CatalogError:
        raise ValueError("unknown gold_diagnosis") from None
    turns = obj.get("turns")
    if not isinstance(turns, list):
        raise ValueError("missing turns")
    reasoning = obj.get("reasoning", "")
    if not isinstance(reasoning, str):
        raise ValueError("reasoning is not text")
    try:
        return RawRecord(str(rid), tuple(parse_turns(turns)), reasoning, gold)
    except InvalidTranscript as exc:
        raise ValueError(f"invalid turns: {exc}") from None


def ingest(path: str | Path, catalog: Catalog | None = None) -> IngestResult:
    """Read line-delimited JSON records. Bad lines become rejects, never vanish."""
    catalog = default_catalog() if catalog is None else catalog
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableSource(f"cannot read {path}: {exc}") from exc

    records: list[RawRecord] = []
    rejects: list[Reject] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError:
            rejects.append(Reject(lineno, None, "invalid JSON"))
            continue
        rid = obj.get("id") if isinstance(obj, dict) else None
        try:
            record = parse_record(obj, catalog)
        except ValueError as exc:
            rejects.append(Reject(lineno, None if rid is None else str(rid), str(exc)))
            continue
        if record.id in seen:
            rejects.append(Reject(lineno, record.id, "duplicate id"))
            continue
        seen.add(record.id)
        records.append(record)
    if not records:
        raise EmptyDataset(f"{path}: no valid records ({len(rejects)} rejected)")
    return IngestResult(records, rejects)


def diagnosis_line(code: DsmCode) -> str:
    return f"Diagnosis: {code.code} {code.label}"


def to_finetune_sample(
    record: RawRecord,
    template: str = DEFAULT_DIAGNOSTIC_TEMPLATE,
    library: TemplateLibrary | None = None,
) -> FineTuneSample:
    library = library or default_library()
    instruction = render_instruction(library.diagnostic(template))
    reasoning = record.clinician_reasoning.rstrip()
    line = diagnosis_line(record.gold_diagnosis)
    text = f"{reasoning}\n{line}" if reasoning.strip() else line
    return FineTuneSample(instruction, render_transcript(record.turns), text)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: Fraction = Fraction(2, 3)
    validation_fraction: Fraction = Fraction(1, 6)
    test_fraction: Fraction = Fraction(1, 6)
    seed: int = 0

    def __post_init__(self) -> None:
        total = self.train_fraction + self.validation_fraction + self.test_fraction
        if total != 1:
            raise ValueError(f"split fractions sum to {total}, not 1")
        if self.validation_fraction != self.test_fraction:
            raise ValueError("validation and test fractions must be equal")

    def sizes(self, n: int) -> tuple[int, int, int]:
        # Train is floored; the rest is halved with the odd record going to
        # test, which keeps every size within 1 of n * fraction.
        n_train = int(n * self.train_fraction)
        rest = n - n_train
        n_val = rest // 2
        return n_train, n_val, rest - n_val


def split(
    records: Sequence[T], spec: SplitSpec = SplitSpec()
) -> tuple[list[T], list[T], list[T]]:
    if not records:
        raise ValueError("cannot split an empty record list")
    order = list(range(len(records)))
    random.Random(spec.seed).shuffle(order)
    n_train, n_val, _ = spec.sizes(len(records))
    shuffled = [records[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


@dataclass
class SplitEntry:
    file: str
    count: int
    sha256: str


@dataclass
class DatasetManifest:
    splits: dict[str, SplitEntry] = field(default_factory=dict)
    seed: int | None = None
    source_sha256: str | None = None
    template: str | None = None
    rejects: int = 0

    @property
    def total(self) -> int:
        return sum(s.count for s in self.splits.values())

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["total"] = self.total
        return d

    def write(self, path: str | Path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise UnwritableTarget(f"cannot write {path}: {exc}") from exc


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_lines(path: Path, lines: Sequence[str]) -> str:
    data = "".join(line + "\n" for line in lines).encode("utf-8")
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise UnwritableTarget(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def export_jsonl(samples: Sequence[FineTuneSample], path: str | Path) -> DatasetManifest:
    if not samples:
        raise ValueError("nothing to export")
    return _export(samples, Path(path))


def _export(samples: Sequence[FineTuneSample], path: Path) -> DatasetManifest:
    digest = _write_lines(path, [s.to_json() for s in samples])
    return DatasetManifest(splits={path.stem: SplitEntry(path.name, len(samples), digest)})


def load_samples(path: str | Path) -> list[FineTuneSample]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableSource(f"cannot read {path}: {exc}") from exc
    samples = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if not isinstance(obj, dict) or set(obj) != set(SAMPLE_FIELDS):
            raise DatasetError(f"{path}:{lineno}: expected exactly {SAMPLE_FIELDS}")
        samples.append(FineTuneSample(**obj))
    return samples


def prepare_data(
    source: str | Path,
    outdir: str | Path,
    *,
    seed: int = 0,
    template: str = DEFAULT_DIAGNOSTIC_TEMPLATE,
    catalog: Catalog | None = None,
    library: TemplateLibrary | None = None,
) -> DatasetManifest:
    """ingest -> transform -> split -> export, writing a manifest and rejects file."""
    result = ingest(source, catalog)
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritableTarget(f"cannot create {out}: {exc}") from exc

    samples = [to_finetune_sample(r, template, library) for r in result.records]
    parts = split(samples, SplitSpec(seed=seed))
    manifest = DatasetManifest(
        seed=seed,
        source_sha256=file_sha256(source),
        template=template,
        rejects=len(result.rejects),
    )
    for name, part in zip(("train", "validation", "test"), parts):
        manifest.splits.update(_export(part, out / f"{name}.jsonl").splits)
    _write_lines(out / "rejects.jsonl", [json.dumps(asdict(r)) for r in result.rejects])
    manifest.write(out / "manifest.json")
    return manifest
