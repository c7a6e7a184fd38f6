"""Binary classification metrics over indicator predictions.

Convention: positive = 1 = "the provision exists". A false positive
asserts a rule that does not exist; a false negative denies one that does.
Ratios with a zero denominator are reported as absent (None) rather than
silently zero, and renderers show them as an em dash.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import LengthMismatch


def f1_of(precision: float | None, recall: float | None) -> float | None:
    """Harmonic mean of precision and recall; absent when undefined."""
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2.0 * precision * recall / (precision + recall)


def balanced_accuracy_of(recall: float | None, specificity: float | None) -> float | None:
    """Mean of sensitivity and specificity; absent when either is."""
    if recall is None or specificity is None:
        return None
    return (recall + specificity) / 2.0


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float | None:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1(self) -> float | None:
        return f1_of(self.precision, self.recall)

    @property
    def balanced_accuracy(self) -> float | None:
        return balanced_accuracy_of(self.recall, self.specificity)

    @property
    def fpr(self) -> float | None:
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def fnr(self) -> float | None:
        return _ratio(self.fn, self.fn + self.tp)

    def merged(self, other: "MetricReport") -> "MetricReport":
        """Pooled counts; metrics over concatenated predictions equal metrics
        over merged reports."""
        return MetricReport(
            tp=self.tp + other.tp, fp=self.fp + other.fp,
            tn=self.tn + other.tn, fn=self.fn + other.fn,
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "specificity": self.specificity,
            "f1": self.f1,
            "balanced_accuracy": self.balanced_accuracy,
            "fpr": self.fpr,
            "fnr": self.fnr,
        }


def _validate_binary(name: str, values: Sequence[int]) -> None:
    for v in values:
        if v not in (0, 1) or isinstance(v, bool):
            raise ValueError(f"{name} must contain only 0/1, found {v!r}")


def compute_metrics(predictions: Sequence[int], gold: Sequence[int]) -> MetricReport:
    """Confusion counts and the full metric suite for two aligned 0/1 lists."""
    if len(predictions) != len(gold):
        raise LengthMismatch(len(gold), len(predictions))
    if not predictions:
        raise ValueError("compute_metrics requires at least one pair")
    _validate_binary("predictions", predictions)
    _validate_binary("gold", gold)
    tp = fp = tn = fn = 0
    for p, g in zip(predictions, gold):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 0:
            tn += 1
        else:
            fn += 1
    return MetricReport(tp=tp, fp=fp, tn=tn, fn=fn)
