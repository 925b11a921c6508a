"""Append-only JSONL audit log with per-record hash chaining.

Each line is the canonical JSON of one record (sorted keys, no whitespace,
UTF-8). ``record_hash`` is the SHA-256 of the canonical record without its
``record_hash`` field; ``prev_hash`` links to the preceding record, with 64
zeros for the first. Verification re-serializes every line and compares the
bytes, so any single-byte change is caught.
"""

from __future__ import annotations

import hashlib
import json
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

GENESIS_HASH = "0" * 64


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def record_hash(record: dict[str, Any]) -> str:
    body = {k: v for k, v in record.items() if k != "record_hash"}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChainStatus:
    verified: bool
    records: int
    broken_at: int | None = None  # 1-based record number
    detail: str | None = None

    @property
    def status(self) -> str:
        return "ok" if self.verified else f"broken at record {self.broken_at}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "verified": self.verified,
            "status": self.status,
            "records": self.records,
            "broken_at": self.broken_at,
            "detail": self.detail,
        }


def verify_bytes(data: bytes) -> ChainStatus:
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    elif lines:
        return ChainStatus(False, len(lines), len(lines), "file does not end with a newline")
    prev = GENESIS_HASH
    for k, raw in enumerate(lines, 1):
        try:
            record = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return ChainStatus(False, len(lines), k, "unparseable record")
        if not isinstance(record, dict):
            return ChainStatus(False, len(lines), k, "record is not an object")
        if canonical_json(record).encode("utf-8") != raw:
            return ChainStatus(False, len(lines), k, "record is not in canonical form")
        if record.get("prev_hash") != prev:
            return ChainStatus(False, len(lines), k, "prev_hash does not link to previous record")
        if record.get("record_hash") != record_hash(record):
            return ChainStatus(False, len(lines), k, "record_hash mismatch")
        prev = record["record_hash"]
    return ChainStatus(True, len(lines))


class AuditLog:
    """Single-writer hash chain over a JSONL file."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._head = self._read_head()

    def _read_head(self) -> str:
        head = GENESIS_HASH
        for record in self._iter_records():
            head = record.get("record_hash", head)
        return head

    def _iter_records(self) -> Iterator[dict[str, Any]]:
        with self.path.open("rb") as fh:
            for raw in fh:
                try:
                    record = json.loads(raw.decode("utf-8"))
                except (UnicodeDecodeError, ValueError):
                    continue
                if isinstance(record, dict):
                    yield record

    def append(self, body: dict[str, Any]) -> dict[str, Any]:
        """Chain and persist ``body``; returns the stored record."""
        with self._lock:
            record = dict(body)
            record.setdefault("audit_id", uuid.uuid4().hex)
            record.pop("record_hash", None)
            record["prev_hash"] = self._head
            record["record_hash"] = record_hash(record)
            line = canonical_json(record).encode("utf-8") + b"\n"
            with self.path.open("ab") as fh:
                fh.write(line)
                fh.flush()
            self._head = record["record_hash"]
            return record

    def get(self, audit_id: str) -> dict[str, Any] | None:
        for record in self._iter_records():
            if record.get("audit_id") == audit_id:
                return record
        return None

    def records(self) -> list[dict[str, Any]]:
        return list(self._iter_records())

    def verify(self) -> ChainStatus:
        with self._lock:
            return verify_bytes(self.path.read_bytes())
