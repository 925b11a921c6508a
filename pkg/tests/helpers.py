"""Independent oracles and fixture builders shared by the tests."""

from __future__ import annotations

import json
import random
from fractions import Fraction
from pathlib import Path

SEEDED_CODES = ["295.90", "296.21", "296.41", "300.01", "300.02", "309.81"]


def brute_force_codes(text: str) -> list[str]:
    """Scan every (start, length) window; keep 5/6-char windows shaped NNN.N(N)
    whose surroundings satisfy the boundary rule, then dedupe by first start."""

    def shaped(s: str) -> bool:
        if len(s) not in (5, 6) or s[3] != ".":
            return False
        return all(c in "0123456789" for i, c in enumerate(s) if i != 3)

    def boundary_ok(start: int, end: int) -> bool:
        before = text[start - 1] if start >= 1 else ""
        before2 = text[start - 2] if start >= 2 else ""
        after = text[end] if end < len(text) else ""
        after2 = text[end + 1] if end + 1 < len(text) else ""
        if before.isdigit() and before.isascii():
            return False
        if before == "." and before2.isdigit() and before2.isascii():
            return False
        if after.isdigit() and after.isascii():
            return False
        if after == "." and after2.isdigit() and after2.isascii():
            return False
        return True

    hits = []
    for start in range(len(text)):
        for length in (5, 6):
            end = start + length
            if end <= len(text) and shaped(text[start:end]) and boundary_ok(start, end):
                hits.append((start, text[start:end]))
    seen, out = set(), []
    for _, code in sorted(hits):
        if code not in seen:
            seen.add(code)
            out.append(code)
    return out


def majority_oracle(votes: list[str | None]) -> tuple[str, str | None, Fraction]:
    """Reference vote on a list of primaries (None = abstention).

    Returns (status, winner, ratio) without sharing code with the engine.
    """
    n = len(votes)
    best_code, best_count, tied = None, 0, False
    for code in sorted({v for v in votes if v is not None}):
        count = votes.count(code)
        if count > best_count:
            best_code, best_count, tied = code, count, False
        elif count == best_count:
            tied = True
    ratio = Fraction(best_count, n)
    if best_code is None:
        return "undetermined", None, Fraction(0)
    if not tied and all(v == best_code for v in votes):
        return "unanimous", best_code, ratio
    if not tied and best_count * 2 > n:
        return "majority", best_code, ratio
    return "undetermined", None, ratio


PATIENT_LINES = [
    "I can't sleep and I feel on edge all the time.",
    "Everything feels pointless lately.",
    "My heart pounds out of nowhere.",
    "I keep hearing someone calling my name.",
    "Nightmares about the accident wake me up.",
    "I've been spending money like crazy and I feel unstoppable.",
]
DOCTOR_LINES = [
    "How long has this been going on?",
    "How is this affecting your work?",
    "Can you describe your mood this week?",
    "Have you noticed changes in appetite?",
]


def synthetic_record(i: int, rng: random.Random) -> dict:
    turns = []
    for k in range(rng.randint(1, 4)):
        turns.append({"speaker": "psychiatrist", "text": f"{rng.choice(DOCTOR_LINES)} ({i}.{k})"})
        turns.append({"speaker": "patient", "text": f"{rng.choice(PATIENT_LINES)} ({i}.{k})"})
    reasoning = "" if rng.random() < 0.1 else f"Clinician note {i}: symptoms reviewed against DSM-5 criteria."
    return {
        "id": f"rec-{i:05d}",
        "turns": turns,
        "reasoning": reasoning,
        "diagnosis_code": rng.choice(SEEDED_CODES),
    }


def write_records(path: Path, n: int, seed: int = 0) -> list[dict]:
    rng = random.Random(seed)
    records = [synthetic_record(i, rng) for i in range(n)]
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return records
