"""Quality and cost metrics, the oracle-cascade reference, and evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .core import LabelDef, LabelSchema, Labels, MailCascadeError

logger = logging.getLogger(__name__)

#: Reported in place of an infinite reduction factor when a method costs nothing.
MAX_REDUCTION = 1e9


class MetricError(MailCascadeError):
    pass


class LengthMismatch(MetricError):
    pass


class ValueOutOfClassSet(MetricError):
    pass


def _check_lengths(predictions: Sequence, references: Sequence) -> None:
    if len(predictions) != len(references):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise LengthMismatch("cannot score an empty sequence")


def _f1_counts(tp: int, fp: int, fn: int) -> Fraction:
    if tp + fp + fn == 0:
        return Fraction(1)
    return Fraction(2 * tp, 2 * tp + fp + fn)


def f1_binary(predictions: Sequence[int], references: Sequence[int]) -> float:
    """Positive-class (1) F1. Both sides free of positives scores 1.0."""
    _check_lengths(predictions, references)
    tp = fp = fn = 0
    for p, r in zip(predictions, references):
        if p not in (0, 1) or r not in (0, 1):
            raise ValueOutOfClassSet(f"binary F1 got values {p!r}, {r!r}")
        tp += p == 1 and r == 1
        fp += p == 1 and r == 0
        fn += p == 0 and r == 1
    return float(_f1_counts(tp, fp, fn))


def f1_macro(predictions: Sequence[int], references: Sequence[int], classes: Sequence[int]) -> float:
    """Unweighted mean of one-vs-rest F1; a class absent from both sides contributes 1.0."""
    _check_lengths(predictions, references)
    allowed = set(classes)
    for v in (*predictions, *references):
        if v not in allowed:
            raise ValueOutOfClassSet(f"{v!r} not in {sorted(allowed)}")
    total = Fraction(0)
    for c in classes:
        tp = sum(p == c and r == c for p, r in zip(predictions, references))
        fp = sum(p == c and r != c for p, r in zip(predictions, references))
        fn = sum(p != c and r == c for p, r in zip(predictions, references))
        total += _f1_counts(tp, fp, fn)
    return float(total / len(classes))


def label_f1(predictions: Sequence[int], references: Sequence[int], label: LabelDef) -> float:
    if label.is_binary:
        return f1_binary(predictions, references)
    return f1_macro(predictions, references, label.classes)


def cost_reduction_factor(method_cost: float, baseline_cost: float) -> float:
    """Baseline cost over method cost. Factors below 1 are reported as-is."""
    if method_cost <= 0:
        logger.warning("method cost is zero; reporting sentinel reduction %g", MAX_REDUCTION)
        return MAX_REDUCTION
    return min(baseline_cost / method_cost, MAX_REDUCTION)


def oracle_predictions(model_outputs: Sequence[Sequence[int]], references: Sequence[int]) -> list[int]:
    """Per email: the reference if any model agrees with it, else the last (most expensive) model's output.

    ``model_outputs`` is ordered cheapest to most expensive, one sequence per model.
    """
    if not model_outputs:
        raise MetricError("oracle needs at least one model")
    out = []
    for j, ref in enumerate(references):
        try:
            values = [m[j] for m in model_outputs]
        except IndexError:
            raise MetricError(f"missing cached output for email index {j}") from None
        out.append(ref if ref in values else values[-1])
    return out


def oracle_cascade_f1(model_outputs: Sequence[Sequence[int]], references: Sequence[int], label: LabelDef) -> float:
    return label_f1(oracle_predictions(model_outputs, references), references, label)


# -- reports ------------------------------------------------------------------


@dataclass
class EvaluationReport:
    per_label_f1: dict[str, float]
    average_f1: float
    cost_reduction_factor: float
    oracle_f1: float | None
    config_hash: str
    usage_fractions: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "per_label_f1": self.per_label_f1,
            "average_f1": self.average_f1,
            "cost_reduction_factor": self.cost_reduction_factor,
            "oracle_f1": self.oracle_f1,
            "config_hash": self.config_hash,
            "usage_fractions": self.usage_fractions,
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


REPORT_METADATA = {
    "f1_aggregation": "macro over labels; multiclass labels use macro-F1 over classes",
    "vacuous_class_convention": "class absent from predictions and references scores 1.0",
}


def per_label_scores(predictions: Labels, references: Labels, schema: LabelSchema) -> dict[str, float]:
    ids = sorted(references)
    scores = {}
    for lab in schema:
        try:
            preds = [predictions[i][lab.name] for i in ids]
        except KeyError as exc:
            raise MetricError(f"missing prediction for {exc}") from None
        refs = [references[i][lab.name] for i in ids]
        scores[lab.name] = label_f1(preds, refs, lab)
    return scores


def average(values: Mapping[str, float] | Sequence[float]) -> float:
    vals = list(values.values()) if isinstance(values, Mapping) else list(values)
    return float(sum(Fraction(v) for v in vals) / len(vals))


def evaluate(
    predictions: Labels,
    references: Labels,
    schema: LabelSchema,
    *,
    method_cost: float,
    baseline_cost: float,
    config_hash: str = "",
    oracle_f1: float | None = None,
    usage_fractions: Mapping[str, float] | None = None,
) -> EvaluationReport:
    scores = per_label_scores(predictions, references, schema)
    return EvaluationReport(
        per_label_f1=scores,
        average_f1=average(scores),
        cost_reduction_factor=cost_reduction_factor(method_cost, baseline_cost),
        oracle_f1=oracle_f1,
        config_hash=config_hash,
        usage_fractions=dict(usage_fractions or {}),
        metadata=dict(REPORT_METADATA, method_zero_cost=method_cost <= 0),
    )
