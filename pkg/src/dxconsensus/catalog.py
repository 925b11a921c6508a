"""DSM-5 code registry and extraction of codes from free-form model output."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

CATEGORIES = frozenset({"mood", "anxiety", "trauma", "psychotic", "other"})

CODE_PATTERN = re.compile(r"\d{3}\.\d{1,2}", re.ASCII)

# A code is not glued to a preceding digit ("1296.21") or a preceding
# "<digit>." ("1.296.21"), and is not followed by a digit or by ".<digit>".
# A bare trailing dot is allowed so sentence-final codes still extract.
_EXTRACT_RE = re.compile(r"(?<!\d)(?<!\d\.)(\d{3}\.\d{1,2})(?!\d)(?!\.\d)", re.ASCII)


class CatalogError(Exception):
    """Base class for catalog errors."""


class MalformedCode(CatalogError, ValueError):
    """Text does not match the DSM-5 code pattern."""


class UnknownCode(CatalogError, KeyError):
    """Well-formed code that is absent from the catalog."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown code"


@dataclass(frozen=True, order=True)
class DsmCode:
    code: str
    label: str = field(compare=False)
    category: str = field(default="other", compare=False)

    def __post_init__(self) -> None:
        if not CODE_PATTERN.fullmatch(self.code):
            raise MalformedCode(f"malformed DSM-5 code: {self.code!r}")
        if not self.label.strip():
            raise ValueError(f"empty label for {self.code}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r} for {self.code}")

    def __str__(self) -> str:
        return f"{self.code} {self.label}"


@dataclass(frozen=True)
class CodeCandidate:
    """A code found in text; ``entry`` is None when the code is not catalogued."""

    code: str
    entry: DsmCode | None = None

    @property
    def catalogued(self) -> bool:
        return self.entry is not None


class Catalog(Mapping[str, DsmCode]):
    """Immutable code -> DsmCode mapping."""

    def __init__(self, entries: Iterable[DsmCode]) -> None:
        table: dict[str, DsmCode] = {}
        for entry in entries:
            if entry.code in table:
                raise ValueError(f"duplicate catalog code {entry.code}")
            table[entry.code] = entry
        self._entries = MappingProxyType(table)

    def __getitem__(self, code: str) -> DsmCode:
        return self._entries[code]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"Catalog({sorted(self._entries)})"

    @classmethod
    def from_text(cls, text: str) -> "Catalog":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"catalog line {lineno}: expected 3 tab-separated fields")
            code, label, category = (p.strip() for p in parts)
            entries.append(DsmCode(code, label, category))
        return cls(entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "Catalog":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def validate_code(self, text: str) -> DsmCode:
        code = text.strip()
        if not CODE_PATTERN.fullmatch(code):
            raise MalformedCode(f"malformed DSM-5 code: {text!r}")
        try:
            return self._entries[code]
        except KeyError:
            raise UnknownCode(f"DSM-5 code {code} is not in the catalog") from None

    def lookup_label(self, code: DsmCode | str) -> str:
        key = code.code if isinstance(code, DsmCode) else code
        try:
            return self._entries[key].label
        except KeyError:
            raise UnknownCode(f"DSM-5 code {key} is not in the catalog") from None

    def scan_codes(self, text: str) -> list[CodeCandidate]:
        """Every code occurrence in ``text``, repeats included."""
        return [
            CodeCandidate(m.group(1), self._entries.get(m.group(1)))
            for m in _EXTRACT_RE.finditer(text)
        ]

    def extract_codes(self, text: str) -> list[CodeCandidate]:
        """Return every code in ``text`` in first-appearance order, deduplicated."""
        seen: set[str] = set()
        found = []
        for candidate in self.scan_codes(text):
            if candidate.code not in seen:
                seen.add(candidate.code)
                found.append(candidate)
        return found


@lru_cache(maxsize=1)
def default_catalog() -> Catalog:
    text = resources.files("dxconsensus").joinpath("data/dsm5_codes.tsv").read_text("utf-8")
    return Catalog.from_text(text)


def _resolve(catalog: Catalog | None) -> Catalog:
    return default_catalog() if catalog is None else catalog


def validate_code(text: str, catalog: Catalog | None = None) -> DsmCode:
    return _resolve(catalog).validate_code(text)


def lookup_label(code: DsmCode | str, catalog: Catalog | None = None) -> str:
    return _resolve(catalog).lookup_label(code)


def extract_codes(text: str, catalog: Catalog | None = None) -> list[CodeCandidate]:
    return _resolve(catalog).extract_codes(text)
