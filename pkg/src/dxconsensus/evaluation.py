"""Diagnostic accuracy reports and training/validation loss-curve analytics."""

from __future__ import annotations

import enum
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .catalog import Catalog, DsmCode, default_catalog

NONE_LABEL = "none"


class EvaluationError(ValueError):
    pass


class EmptyEvaluation(EvaluationError):
    pass


class InsufficientPoints(EvaluationError):
    pass


class MisalignedCurves(EvaluationError):
    pass


# --- diagnostic accuracy ---------------------------------------------------


@dataclass(frozen=True)
class EvalCase:
    record_id: str
    gold: DsmCode
    predicted: DsmCode | None
    source: str = "consensus"


@dataclass
class CodeStats:
    support: int
    predicted: int
    true_positive: int

    @property
    def precision(self) -> Fraction | None:
        return Fraction(self.true_positive, self.predicted) if self.predicted else None

    @property
    def recall(self) -> Fraction | None:
        return Fraction(self.true_positive, self.support) if self.support else None


@dataclass
class EvalReport:
    n: int
    correct: int
    abstained: int
    accuracy: Fraction
    abstention_rate: Fraction
    abstention_policy: str
    per_code: dict[str, CodeStats]
    confusion: dict[str, dict[str, int]]

    def accuracy_from_confusion(self) -> Fraction:
        trace = sum(row.get(code, 0) for code, row in self.confusion.items())
        total = sum(sum(row.values()) for row in self.confusion.values())
        if self.abstention_policy == "exclude":
            total -= sum(row.get(NONE_LABEL, 0) for row in self.confusion.values())
        return Fraction(trace, total) if total else Fraction(0)

    def to_dict(self) -> dict[str, Any]:
        def frac(f: Fraction | None) -> dict[str, Any] | None:
            return None if f is None else {"exact": str(f), "value": float(f)}

        return {
            "n": self.n,
            "correct": self.correct,
            "abstained": self.abstained,
            "accuracy": frac(self.accuracy),
            "abstention_rate": frac(self.abstention_rate),
            "abstention_policy": self.abstention_policy,
            "per_code": {
                code: {
                    "support": s.support,
                    "predicted": s.predicted,
                    "precision": frac(s.precision),
                    "recall": frac(s.recall),
                }
                for code, s in self.per_code.items()
            },
            "confusion": self.confusion,
        }

    def format_text(self) -> str:
        lines = [
            f"cases: {self.n}  correct: {self.correct}  abstained: {self.abstained}",
            f"accuracy: {self.accuracy} ({float(self.accuracy):.4f}), abstentions {self.abstention_policy}",
            f"abstention rate: {self.abstention_rate} ({float(self.abstention_rate):.4f})",
            "",
            f"{'code':<8}{'support':>9}{'precision':>11}{'recall':>9}",
        ]
        for code, s in self.per_code.items():
            p = "-" if s.precision is None else f"{float(s.precision):.3f}"
            r = "-" if s.recall is None else f"{float(s.recall):.3f}"
            lines.append(f"{code:<8}{s.support:>9}{p:>11}{r:>9}")
        cols = list(next(iter(self.confusion.values())).keys()) if self.confusion else []
        lines += ["", "confusion (rows gold, columns predicted):", " " * 8 + "".join(f"{c:>8}" for c in cols)]
        for gold, row in self.confusion.items():
            lines.append(f"{gold:<8}" + "".join(f"{row[c]:>8}" for c in cols))
        return "\n".join(lines)


def evaluate(
    cases: Sequence[EvalCase],
    abstentions: str = "wrong",
    catalog: Catalog | None = None,
) -> EvalReport:
    """Score predictions against gold codes.

    ``abstentions="wrong"`` counts a missing prediction as an error;
    ``"exclude"`` drops it from the accuracy denominator. Either way the
    abstention rate is reported over all cases.
    """
    if not cases:
        raise EmptyEvaluation("no cases to evaluate")
    if abstentions not in ("wrong", "exclude"):
        raise ValueError(f"unknown abstention policy {abstentions!r}")
    catalog = default_catalog() if catalog is None else catalog

    golds = sorted(set(catalog) | {c.gold.code for c in cases})
    columns = sorted(set(golds) | {c.predicted.code for c in cases if c.predicted}) + [NONE_LABEL]
    confusion = {g: {col: 0 for col in columns} for g in golds}
    for c in cases:
        confusion[c.gold.code][c.predicted.code if c.predicted else NONE_LABEL] += 1

    n = len(cases)
    correct = sum(1 for c in cases if c.predicted and c.predicted.code == c.gold.code)
    abstained = sum(1 for c in cases if c.predicted is None)
    denom = n if abstentions == "wrong" else n - abstained
    per_code = {}
    for code in golds:
        per_code[code] = CodeStats(
            support=sum(confusion[code].values()),
            predicted=sum(row.get(code, 0) for row in confusion.values()),
            true_positive=confusion[code][code],
        )
    return EvalReport(
        n=n,
        correct=correct,
        abstained=abstained,
        accuracy=Fraction(correct, denom) if denom else Fraction(0),
        abstention_rate=Fraction(abstained, n),
        abstention_policy=abstentions,
        per_code=per_code,
        confusion=confusion,
    )


# --- loss curves -------------------------------------------------------------


@dataclass(frozen=True)
class LossCurve:
    steps: tuple[int, ...]
    train: tuple[float, ...]
    validation: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        object.__setattr__(self, "train", tuple(float(v) for v in self.train))
        object.__setattr__(self, "validation", tuple(float(v) for v in self.validation))
        if not len(self.steps) == len(self.train) == len(self.validation):
            raise MisalignedCurves("steps, train and validation must have equal lengths")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise EvaluationError("steps must be strictly increasing")
        for v in self.train + self.validation:
            if not math.isfinite(v) or v < 0:
                raise EvaluationError(f"loss values must be finite and >= 0, got {v}")

    def __len__(self) -> int:
        return len(self.steps)

    def shifted(self, offset: int) -> "LossCurve":
        return LossCurve(tuple(s + offset for s in self.steps), self.train, self.validation)


def read_series(path: str | Path) -> list[tuple[int, float]]:
    """Two-column ``step value`` rows; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EvaluationError(f"{path}:{lineno}: expected 'step value'")
        step = float(parts[0])
        if step != int(step):
            raise EvaluationError(f"{path}:{lineno}: step must be an integer")
        rows.append((int(step), float(parts[1])))
    return rows


def align(
    train: Iterable[tuple[int, float]], validation: Iterable[tuple[int, float]]
) -> LossCurve:
    """Merge by step. Train steps without a validation point are dropped; a
    validation step with no train point is an error."""
    train_by_step = dict(train)
    val_by_step = dict(validation)
    orphans = sorted(set(val_by_step) - set(train_by_step))
    if orphans:
        raise MisalignedCurves(f"validation steps without train loss: {orphans[:5]}")
    steps = sorted(val_by_step)
    return LossCurve(
        tuple(steps), tuple(train_by_step[s] for s in steps), tuple(val_by_step[s] for s in steps)
    )


def load_curve(train_path: str | Path, validation_path: str | Path) -> LossCurve:
    return align(read_series(train_path), read_series(validation_path))


def trapezoid(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise ValueError("xs and ys differ in length")
    return math.fsum((x1 - x0) * (y0 + y1) / 2 for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))


def _require_points(curve: LossCurve, n: int = 2) -> None:
    if len(curve) < n:
        raise InsufficientPoints(f"need at least {n} aligned points, got {len(curve)}")


def area_between_curves(curve: LossCurve) -> float:
    """Trapezoidal integral of |validation - train| over steps (loss x steps)."""
    _require_points(curve)
    gap = [abs(v - t) for t, v in zip(curve.train, curve.validation)]
    return trapezoid(curve.steps, gap)


def signed_area_between_curves(curve: LossCurve) -> float:
    _require_points(curve)
    gap = [v - t for t, v in zip(curve.train, curve.validation)]
    return trapezoid(curve.steps, gap)


def loss_ratio(curve: LossCurve) -> list[float | None]:
    """validation / train per step; None where train loss is zero."""
    return [v / t if t > 0 else None for t, v in zip(curve.train, curve.validation)]


def loss_derivatives(curve: LossCurve) -> tuple[list[float], list[float]]:
    """Finite differences against the actual step spacing: central inside,
    one-sided at both ends."""
    _require_points(curve)
    x = np.asarray(curve.steps, dtype=float)
    train = np.gradient(np.asarray(curve.train), x, edge_order=1)
    val = np.gradient(np.asarray(curve.validation), x, edge_order=1)
    return train.tolist(), val.tolist()


class FlagKind(str, enum.Enum):
    OVERFIT_SPIKE = "overfit_spike"
    RATIO_EXCEEDS_THRESHOLD = "ratio_exceeds_threshold"
    DIVERGENCE = "divergence"


@dataclass(frozen=True)
class Flag:
    step: int
    kind: FlagKind

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "kind": self.kind.value}


@dataclass(frozen=True)
class Thresholds:
    spike_factor: float = 2.0
    spike_window: int = 5
    ratio: float = 2.0
    divergence_steps: int = 3


@dataclass
class LossAnalytics:
    steps: list[int]
    area_between: float
    signed_area: float
    ratio_series: list[float | None]
    diff_series: list[float]
    train_derivative: list[float]
    validation_derivative: list[float]
    flags: list[Flag] = field(default_factory=list)

    def ratio_range(self) -> tuple[float, float] | None:
        defined = [r for r in self.ratio_series if r is not None]
        return (min(defined), max(defined)) if defined else None

    def to_dict(self) -> dict[str, Any]:
        rng = self.ratio_range()
        return {
            "points": len(self.steps),
            "first_step": self.steps[0],
            "last_step": self.steps[-1],
            "area_between": self.area_between,
            "signed_area": self.signed_area,
            "ratio_min": rng[0] if rng else None,
            "ratio_max": rng[1] if rng else None,
            "steps": self.steps,
            "ratio_series": self.ratio_series,
            "diff_series": self.diff_series,
            "train_derivative": self.train_derivative,
            "validation_derivative": self.validation_derivative,
            "flags": [f.to_dict() for f in self.flags],
        }

    def format_text(self) -> str:
        rng = self.ratio_range()
        lines = [
            f"aligned points: {len(self.steps)} (steps {self.steps[0]}..{self.steps[-1]})",
            f"area between curves: {self.area_between:.6g} (signed {self.signed_area:.6g})",
            "loss ratio range: " + ("undefined" if rng is None else f"{rng[0]:.4g} .. {rng[1]:.4g}"),
            f"flags: {len(self.flags)}",
        ]
        lines += [f"  step {f.step}: {f.kind.value}" for f in self.flags]
        return "\n".join(lines)


def flag_generalization(analytics: LossAnalytics, thresholds: Thresholds = Thresholds()) -> list[Flag]:
    flags: list[Flag] = []
    diff, steps = analytics.diff_series, analytics.steps

    for i in range(1, len(diff)):
        window = diff[max(0, i - thresholds.spike_window) : i]
        baseline = statistics.median(window)
        # A non-positive baseline has no meaningful multiple.
        if baseline > 0 and diff[i] > thresholds.spike_factor * baseline:
            flags.append(Flag(steps[i], FlagKind.OVERFIT_SPIKE))

    for step, r in zip(steps, analytics.ratio_series):
        if r is not None and r > thresholds.ratio:
            flags.append(Flag(step, FlagKind.RATIO_EXCEEDS_THRESHOLD))

    run_start, run = 0, 0
    for i, (dt, dv) in enumerate(zip(analytics.train_derivative, analytics.validation_derivative)):
        if dv > 0 and dt < 0:
            if run == 0:
                run_start = i
            run += 1
            if run == thresholds.divergence_steps:
                flags.append(Flag(steps[run_start], FlagKind.DIVERGENCE))
        else:
            run = 0

    flags.sort(key=lambda f: (f.step, f.kind.value))
    return flags


def analyze(curve: LossCurve, thresholds: Thresholds = Thresholds()) -> LossAnalytics:
    train_d, val_d = loss_derivatives(curve)
    analytics = LossAnalytics(
        steps=list(curve.steps),
        area_between=area_between_curves(curve),
        signed_area=signed_area_between_curves(curve),
        ratio_series=loss_ratio(curve),
        diff_series=[v - t for t, v in zip(curve.train, curve.validation)],
        train_derivative=train_d,
        validation_derivative=val_d,
    )
    analytics.flags = flag_generalization(analytics, thresholds)
    return analytics
