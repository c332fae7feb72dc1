"""Offline search for cost/quality operating points.

The knob space (labeling method per label, model pool, per-model thresholds,
cascade order, calibration size) is searched piecewise rather than
exhaustively:

* every generative model is run alone once per (email, label); the cascade
  subset is the Pareto-efficient set of those solo runs, ordered by size;
* thresholds below a model's poor-quality floor are pruned;
* threshold combinations are evaluated over the cached solo outputs with
  numpy, so the sweep never touches a backend;
* binary labels move to the embedding classifier when it is about as good.

Costs inside this module are kept as integers in *quarter micro-units*,
``(3 * price_in + price_out) * tokens``, which is four times the 3:1 blended
cost. Ratios of these are exact and equal the blended-cost ratios.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .backends import DEFAULT_PROMPT_TOKENS, Backend, MalformedOutput, SoloOutput
from .cascade import (
    CascadeConfig,
    LabelingPlan,
    Method,
    Provenance,
    SkipRule,
    label_email,
    logprob_to_confidence,
)
from .classifier import ClassifierModel, TrainingConfig, predict, train
from .core import (
    Email,
    LabelDef,
    LabelSchema,
    Labels,
    MailCascadeError,
    ModelKind,
    ModelSpec,
    TokenUsage,
    request_cost,
)
from .metrics import MAX_REDUCTION, _f1_counts, average

logger = logging.getLogger(__name__)

#: 0.00 to 1.00 in steps of 0.05.
DEFAULT_GRID = tuple(round(i * 0.05, 2) for i in range(21))


class ProfilerError(MailCascadeError):
    pass


class MissingBaselineLabel(ProfilerError):
    pass


class EmptyFront(ProfilerError):
    pass


class ConstraintViolation(ProfilerError):
    pass


class OverlappingSets(ProfilerError):
    pass


# -- cost helpers -------------------------------------------------------------


def blended_quarters(spec: ModelSpec, usage: TokenUsage) -> int:
    """Four times the 3:1 blended cost of ``usage`` on ``spec``."""
    return (3 * spec.price_in + spec.price_out) * usage.total


def prompt_usage(email: Email) -> TokenUsage:
    """Usage assumed for one label request when the backend is not asked (baseline accounting)."""
    return TokenUsage(email.token_count_estimate + DEFAULT_PROMPT_TOKENS, 1)


def baseline_quarters(emails: Sequence[Email], schema: LabelSchema, baseline: ModelSpec) -> np.ndarray:
    """Per-email cost of labeling every label with the baseline model."""
    return np.array([blended_quarters(baseline, prompt_usage(e)) * len(schema) for e in emails], dtype=np.int64)


def reduction(baseline_cost: int, method_cost: int) -> tuple[float, bool]:
    """Cost-reduction factor and whether it hit the zero-cost sentinel."""
    if method_cost <= 0:
        return MAX_REDUCTION, True
    return min(float(Fraction(int(baseline_cost), int(method_cost))), MAX_REDUCTION), False


# -- knobs, constraints, points ----------------------------------------------


@dataclass(frozen=True)
class CalibrationSchedule:
    initial: int = 100
    increment: int = 100
    cap: int = 400

    def __post_init__(self) -> None:
        if self.initial < 1 or self.increment < 1 or self.cap < 1:
            raise ValueError("calibration schedule values must be positive")

    def sizes(self) -> list[int]:
        out = [min(self.initial, self.cap)]
        while out[-1] < self.cap:
            out.append(min(out[-1] + self.increment, self.cap))
        return out


@dataclass
class ProfilerKnobs:
    """The searched knobs. Cascade order is derived from size_rank, never searched."""

    pool: list[ModelSpec]
    grid: tuple[float, ...] = DEFAULT_GRID
    methods: dict[str, Method] | None = None  # fixed methods; None lets the profiler decide
    schedule: CalibrationSchedule = field(default_factory=CalibrationSchedule)

    def __post_init__(self) -> None:
        self.grid = tuple(float(g) for g in self.grid)
        if not self.pool:
            raise ProfilerError("model pool is empty")
        if list(self.grid) != sorted(self.grid) or len(set(self.grid)) != len(self.grid):
            raise ProfilerError("threshold grid must be strictly ascending")
        if any(not 0 <= g <= 1 for g in self.grid):
            raise ProfilerError("threshold grid values must lie in [0, 1]")

    def order(self, names: Iterable[str]) -> list[str]:
        ranks = {s.name: s.size_rank for s in self.pool}
        return sorted(names, key=lambda n: ranks[n])


@dataclass(frozen=True)
class OperatorConstraints:
    allowed_model_pool: tuple[str, ...] | None = None
    banned_families: tuple[str, ...] = ()
    max_cascade_size: int | None = None
    tradeoff_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        if self.max_cascade_size is not None and self.max_cascade_size < 1:
            raise ValueError("max_cascade_size must be positive")
        if len(self.tradeoff_weights) != 2 or any(w < 0 for w in self.tradeoff_weights):
            raise ValueError("tradeoff weights must be two nonnegative numbers")

    def check_registry(self, registry: Iterable[str]) -> None:
        if self.allowed_model_pool is not None:
            unknown = set(self.allowed_model_pool) - set(registry)
            if unknown:
                raise ConstraintViolation(f"allowed_model_pool names unregistered models {sorted(unknown)}")

    def allows(self, spec: ModelSpec) -> bool:
        if self.allowed_model_pool is not None and spec.name not in self.allowed_model_pool:
            return False
        return spec.family not in self.banned_families

    def check_plan(self, plan: LabelingPlan, specs: Mapping[str, ModelSpec]) -> None:
        for cfg in plan.cascades.values():
            if self.max_cascade_size is not None and len(cfg.models) > self.max_cascade_size:
                raise ConstraintViolation(f"cascade {cfg.models} exceeds max size {self.max_cascade_size}")
            for m in cfg.models:
                if not self.allows(specs[m]):
                    raise ConstraintViolation(f"cascade uses disallowed model {m!r}")
        if plan.classifier is not None or Method.CLASSIFIER in plan.methods.values():
            if plan.embedding_model is not None and not self.allows(specs[plan.embedding_model]):
                raise ConstraintViolation(f"embedding model {plan.embedding_model!r} is disallowed")


@dataclass(frozen=True)
class TradeoffPoint:
    config: dict
    quality: float
    cost_reduction: float
    per_label_f1: dict = field(default_factory=dict)
    config_hash: str = ""
    capped: bool = False
    cost: int = 0
    usage_fractions: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.quality) and math.isfinite(self.cost_reduction)):
            raise ValueError("tradeoff coordinates must be finite")
        if not self.config_hash:
            object.__setattr__(self, "config_hash", config_hash(self.config))


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def point(quality: float, cost_reduction: float, tag: str = "") -> TradeoffPoint:
    """Bare point for tests and fixtures."""
    return TradeoffPoint({"tag": tag, "q": quality, "c": cost_reduction}, quality, cost_reduction)


# -- Pareto front and selection ------------------------------------------------


def dominates(a: TradeoffPoint, b: TradeoffPoint) -> bool:
    return (
        a.quality >= b.quality
        and a.cost_reduction >= b.cost_reduction
        and (a.quality > b.quality or a.cost_reduction > b.cost_reduction)
    )


def pareto_front(points: Iterable[TradeoffPoint]) -> list[TradeoffPoint]:
    """Non-dominated points; exact duplicates keep the smallest config hash.

    Returned in descending quality order.
    """
    ordered = sorted(points, key=lambda p: (-p.quality, -p.cost_reduction, p.config_hash))
    front: list[TradeoffPoint] = []
    best_c = -math.inf
    for p in ordered:
        if p.cost_reduction > best_c:
            front.append(p)
            best_c = p.cost_reduction
    return front


def _minmax(values: Sequence[float], hi_anchor: float | None) -> list[float]:
    lo = min(values)
    hi = max(values) if hi_anchor is None else max(max(values), hi_anchor)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def choose_tradeoff(
    front: Sequence[TradeoffPoint],
    weights: tuple[float, float] = (1.0, 1.0),
    quality_anchor: float | None = None,
    cost_anchor: float | None = None,
) -> TradeoffPoint:
    """Argmax of ``w_q * q_hat + w_c * c_hat`` after min-max normalization over the front.

    Anchors raise the top of a coordinate's range (the baseline's quality of
    1.0, the cheapest model's reduction factor). Ties go to the smaller hash.
    """
    if not front:
        raise EmptyFront("cannot choose from an empty front")
    qs = _minmax([p.quality for p in front], quality_anchor)
    cs = _minmax([p.cost_reduction for p in front], cost_anchor)
    wq, wc = weights
    scored = [(-(wq * q + wc * c), p.config_hash, i) for i, (p, q, c) in enumerate(zip(front, qs, cs))]
    return front[min(scored)[2]]


def hypervolume(points: Iterable[TradeoffPoint], cost_scale: float) -> float:
    """Area dominated by the points in (cost_reduction / cost_scale, quality), reference (0, 0).

    Both coordinates are clipped to [0, 1].
    """
    pts = sorted(
        ((min(max(p.cost_reduction / cost_scale, 0.0), 1.0), min(max(p.quality, 0.0), 1.0)) for p in points),
        reverse=True,
    )
    area = 0.0
    best_q = 0.0
    for c, q in pts:
        if q > best_q:
            area += c * (q - best_q)
            best_q = q
    return area


# -- cached solo outputs -------------------------------------------------------


class SoloStore:
    """Memoized single-model outputs; the backend is only called on a miss."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self.outputs: dict[tuple[str, str, str], SoloOutput] = {}
        self.embeddings: dict[tuple[str, str], np.ndarray] = {}

    def get(self, model: str, email: Email, label: LabelDef) -> SoloOutput:
        key = (model, email.id, label.name)
        hit = self.outputs.get(key)
        if hit is not None:
            return hit
        spec = self.backend.spec(model)
        try:
            r = self.backend.generate_label(model, email, label)
            out = SoloOutput(
                r.value.value, tuple(r.token_logprobs), logprob_to_confidence(r.token_logprobs),
                request_cost(spec, r.usage), r.usage,
            )
        except MalformedOutput as exc:
            out = SoloOutput(None, (), 0.0, request_cost(spec, exc.usage), exc.usage)
        self.outputs[key] = out
        return out

    def embed(self, model: str, email: Email) -> np.ndarray:
        key = (model, email.id)
        if key not in self.embeddings:
            self.embeddings[key] = self.backend.embed(model, email)
        return self.embeddings[key]


@dataclass
class SoloTable:
    """Solo outputs for one email set as arrays indexed [email]."""

    email_ids: list[str]
    value: dict[tuple[str, str], np.ndarray]  # -1 marks malformed
    conf: dict[tuple[str, str], np.ndarray]  # -inf marks malformed, so it never passes
    cost: dict[tuple[str, str], np.ndarray]  # quarter micro-units

    @classmethod
    def build(
        cls,
        store: SoloStore,
        emails: Sequence[Email],
        models: Sequence[str],
        schema: LabelSchema,
    ) -> SoloTable:
        value, conf, cost = {}, {}, {}
        for m in models:
            spec = store.backend.spec(m)
            for lab in schema:
                outs = [store.get(m, e, lab) for e in emails]
                value[m, lab.name] = np.array([-1 if o.value is None else o.value for o in outs], dtype=np.int64)
                conf[m, lab.name] = np.array(
                    [-np.inf if o.value is None else o.confidence for o in outs], dtype=np.float64
                )
                cost[m, lab.name] = np.array([blended_quarters(spec, o.usage) for o in outs], dtype=np.int64)
        return cls([e.id for e in emails], value, conf, cost)


def reference_arrays(labels: Labels, email_ids: Sequence[str], schema: LabelSchema) -> dict[str, np.ndarray]:
    out = {}
    for lab in schema:
        try:
            out[lab.name] = np.array([labels[i][lab.name] for i in email_ids], dtype=np.int64)
        except KeyError as exc:
            raise MissingBaselineLabel(f"no baseline label for {exc}") from None
    return out


def f1_arrays(pred: np.ndarray, ref: np.ndarray, label: LabelDef) -> float:
    """Same values as :func:`metrics.label_f1`, computed from integer counts."""
    if label.is_binary:
        classes = [1]
    else:
        classes = label.classes
    total = Fraction(0)
    for c in classes:
        p, r = pred == c, ref == c
        tp = int(np.sum(p & r))
        fp = int(np.sum(p & ~r))
        fn = int(np.sum(~p & r))
        total += _f1_counts(tp, fp, fn)
    return float(total / len(classes))


def cascade_arrays(
    table: SoloTable, cfg: CascadeConfig, label: LabelDef
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized cascade walk: (predicted value, cost, chosen model index) per email."""
    k = len(cfg.models)
    vals = np.stack([table.value[m, label.name] for m in cfg.models])
    confs = np.stack([table.conf[m, label.name] for m in cfg.models])
    costs = np.stack([table.cost[m, label.name] for m in cfg.models])
    passed = confs >= np.asarray(cfg.thresholds)[:, None]
    any_pass = passed.any(axis=0)
    stop = np.where(any_pass, passed.argmax(axis=0), k - 1)
    cum = np.cumsum(costs, axis=0)
    cols = np.arange(vals.shape[1])
    cost = cum[stop, cols]
    chosen = vals[stop, cols]
    if not any_pass.all():
        # Fallthrough keeps the last well-formed answer, else the lowest class.
        valid = vals >= 0
        last_valid = np.where(valid.any(axis=0), k - 1 - valid[::-1].argmax(axis=0), -1)
        fall = np.where(last_valid >= 0, vals[np.maximum(last_valid, 0), cols], label.classes[0])
        chosen = np.where(any_pass, chosen, fall)
    return chosen, cost, stop


@dataclass
class EvalInputs:
    """Everything the array evaluator needs for one email set."""

    schema: LabelSchema
    table: SoloTable
    references: dict[str, np.ndarray]
    baseline_cost: int
    embedding_cost: np.ndarray  # per email, quarter micro-units
    classifier_values: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate_plan_arrays(plan: LabelingPlan, inp: EvalInputs) -> TradeoffPoint:
    """Evaluate a labeling plan over cached outputs; mirrors :func:`cascade.label_email` exactly."""
    n = len(inp.table.email_ids)
    assigned: dict[str, np.ndarray] = {}
    total = np.zeros(n, dtype=np.int64)
    needs_embedding = np.zeros(n, dtype=bool)
    per_label = {}
    usage: dict[str, int] = {}
    cascade_requests = 0
    for lab in inp.schema:
        skipped = np.zeros(n, dtype=bool)
        skip_val = np.zeros(n, dtype=np.int64)
        for rule in plan.skip_rules:
            if rule.consequence[0] != lab.name:
                continue
            hit = (assigned[rule.condition[0]] == rule.condition[1]) & ~skipped
            skipped |= hit
            skip_val[hit] = rule.consequence[1]
        if plan.methods[lab.name] is Method.CASCADE:
            cfg = plan.cascades[lab.name]
            pred, cost, stop = cascade_arrays(inp.table, cfg, lab)
            total += np.where(skipped, 0, cost)
            live = stop[~skipped]
            cascade_requests += live.size
            for j, m in enumerate(cfg.models):
                usage[m] = usage.get(m, 0) + int(np.sum(live == j))
        else:
            pred = inp.classifier_values[lab.name]
            needs_embedding |= ~skipped
        pred = np.where(skipped, skip_val, pred)
        assigned[lab.name] = pred
        per_label[lab.name] = f1_arrays(pred, inp.references[lab.name], lab)
    method_cost = int(total.sum() + inp.embedding_cost[needs_embedding].sum())
    factor, capped = reduction(inp.baseline_cost, method_cost)
    fractions = {m: c / cascade_requests for m, c in sorted(usage.items()) if c}
    cfg_dict = plan.to_dict()
    return TradeoffPoint(
        cfg_dict, average(per_label), factor, per_label, plan.config_hash(), capped, method_cost, fractions
    )


def evaluate_config(
    plan: LabelingPlan,
    emails: Sequence[Email],
    baseline_labels: Labels,
    schema: LabelSchema,
    backend: Backend,
    baseline: ModelSpec,
) -> TradeoffPoint:
    """Run the live labeling path over ``emails`` and score it against the baseline labels."""
    refs = reference_arrays(baseline_labels, [e.id for e in emails], schema)
    preds = {lab.name: [] for lab in schema}
    cost = 0
    usage: dict[str, int] = {}
    requests = 0
    for e in emails:
        embedded = False
        for lab, out in zip(schema, label_email(e, schema, plan, backend)):
            preds[lab.name].append(out.value.value)
            if out.trace is not None:
                for a in out.trace.attempts:
                    cost += blended_quarters(backend.spec(a.model), a.usage)
                usage[out.trace.chosen_model] = usage.get(out.trace.chosen_model, 0) + 1
                requests += 1
            elif out.provenance is Provenance.CLASSIFIER and not embedded:
                cost += blended_quarters(
                    backend.spec(plan.embedding_model), backend.embedding_usage(plan.embedding_model, e)
                )
                embedded = True
    per_label = {lab.name: f1_arrays(np.array(preds[lab.name]), refs[lab.name], lab) for lab in schema}
    base = int(baseline_quarters(emails, schema, baseline).sum())
    factor, capped = reduction(base, cost)
    fractions = {m: c / requests for m, c in sorted(usage.items())} if requests else {}
    return TradeoffPoint(
        plan.to_dict(), average(per_label), factor, per_label, plan.config_hash(), capped, cost, fractions
    )


# -- per-knob steps ------------------------------------------------------------


def cascade_plan(schema: LabelSchema, models: Sequence[str], thresholds: Sequence[float]) -> LabelingPlan:
    """All labels on one cascade with shared thresholds."""
    return LabelingPlan(
        methods={lab.name: Method.CASCADE for lab in schema},
        cascades={lab.name: CascadeConfig(lab.name, tuple(models), tuple(thresholds)) for lab in schema},
    )


def rank_models(models: Sequence[str], inp: EvalInputs) -> dict[str, TradeoffPoint]:
    """Each model alone on every label (threshold irrelevant for a single model)."""
    return {m: evaluate_plan_arrays(cascade_plan(inp.schema, [m], [0.0]), inp) for m in models}


def select_cascade_models(
    ranked: Mapping[str, TradeoffPoint],
    knobs: ProfilerKnobs,
    max_size: int | None = None,
) -> list[str]:
    """Pareto-efficient solo models in ascending size order.

    When the front is larger than ``max_size``, keep its highest-quality
    model plus the highest-reduction ones.
    """
    front = pareto_front(ranked.values())
    by_hash = {p.config_hash: m for m, p in ranked.items()}
    names = [by_hash[p.config_hash] for p in front]
    if max_size is not None and len(names) > max_size:
        best_q = names[0]
        rest = sorted(names[1:], key=lambda m: (-ranked[m].cost_reduction, m))[: max_size - 1]
        names = [best_q, *rest]
    return knobs.order(names)


@dataclass(frozen=True)
class PruneResult:
    floor: float | None
    grid: tuple[float, ...]
    bin_agreement: tuple[tuple[float, float, float | None], ...]  # (lo, hi, agreement or None if empty)
    fell_back: bool = False


def prune_thresholds(
    confidences: Sequence[float],
    agrees: Sequence[bool],
    grid: Sequence[float],
    poor_cutoff: float = 0.5,
) -> PruneResult:
    """Drop grid values that would accept outputs from a poor-quality confidence band.

    The grid splits confidences into bins ``[g_i, g_{i+1})`` (plus one below
    the first value and one at or above the last). A bin is poor when the
    outputs falling in it agree with the baseline less than ``poor_cutoff``
    of the time; empty bins are ignored. The floor is the upper edge of the
    highest poor bin, and grid values below it are discarded.
    """
    grid = tuple(float(g) for g in grid)
    c = np.asarray(confidences, dtype=np.float64)
    a = np.asarray(agrees, dtype=bool)
    edges = [-math.inf, *grid, math.inf]
    bins = []
    floor = None
    any_good = False
    for lo, hi in zip(edges, edges[1:]):
        mask = (c >= lo) & (c < hi)
        if not mask.any():
            bins.append((lo, hi, None))
            continue
        agree = float(a[mask].mean())
        bins.append((lo, hi, agree))
        if agree < poor_cutoff:
            floor = hi
        else:
            any_good = True
    if floor is None:
        return PruneResult(None, grid, tuple(bins))
    kept = tuple(g for g in grid if g >= floor)
    if not kept or not any_good:
        logger.warning("threshold pruning would discard every grid value; keeping the full grid")
        return PruneResult(floor, grid, tuple(bins), fell_back=True)
    return PruneResult(floor, kept, tuple(bins))


def solo_agreement(table: SoloTable, model: str, inp: EvalInputs) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (confidence, agrees) pairs for one model across all labels."""
    confs, agrees = [], []
    for lab in inp.schema:
        v = table.value[model, lab.name]
        confs.append(np.where(v < 0, 0.0, table.conf[model, lab.name]))
        agrees.append(v == inp.references[lab.name])
    return np.concatenate(confs), np.concatenate(agrees)


def sweep_thresholds(
    models: Sequence[str],
    grids: Sequence[Sequence[float]],
    inp: EvalInputs,
) -> list[TradeoffPoint]:
    """Every combination of per-model thresholds, shared by all labels, over cached outputs."""
    if len(models) != len(grids):
        raise ProfilerError("one grid per model is required")
    return [
        evaluate_plan_arrays(cascade_plan(inp.schema, models, combo), inp)
        for combo in itertools.product(*grids)
    ]


def mine_skip_rules(
    labels: Labels,
    schema: LabelSchema,
    epsilon: float = 0.05,
    min_support: float = 0.05,
) -> list[SkipRule]:
    """Forward rules ``A=a => B=b`` with P(A=a) >= min_support and P(B=b | A=a) >= 1 - epsilon."""
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    if not 0 < min_support < 1:
        raise ValueError("min_support must lie in (0, 1)")
    ids = sorted(labels)
    if not ids:
        return []
    cols = {lab.name: np.array([labels[i][lab.name] for i in ids]) for lab in schema}
    n = len(ids)
    rules = []
    labs = list(schema)
    for ai, a in enumerate(labs):
        for av in a.classes:
            cond = cols[a.name] == av
            count = int(cond.sum())
            if count == 0 or Fraction(count, n) < Fraction(min_support).limit_denominator(10**9):
                continue
            for b in labs[ai + 1 :]:
                for bv in b.classes:
                    hits = int(np.sum(cond & (cols[b.name] == bv)))
                    conf = Fraction(hits, count)
                    if conf >= 1 - Fraction(epsilon).limit_denominator(10**9):
                        rules.append(SkipRule((a.name, av), (b.name, bv), count / n, float(conf)))
    return rules


@dataclass(frozen=True)
class MethodDecision:
    label: str
    method: Method
    cascade_f1: float
    classifier_f1: float | None


def assign_methods(
    schema: LabelSchema,
    classifier_f1: Mapping[str, float],
    cascade_f1: Mapping[str, float],
    tolerance: float = 0.02,
) -> list[MethodDecision]:
    """Multiclass labels always cascade; binary labels take the classifier within ``tolerance``."""
    out = []
    for lab in schema:
        clf = classifier_f1.get(lab.name) if lab.is_binary else None
        if clf is not None and clf >= cascade_f1[lab.name] - tolerance:
            method = Method.CLASSIFIER
        else:
            method = Method.CASCADE
        out.append(MethodDecision(lab.name, method, cascade_f1[lab.name], clf))
    return out


def cross_fit_predictions(
    X: np.ndarray,
    Y: np.ndarray,
    names: Sequence[str],
    cfg: TrainingConfig,
    folds: int = 2,
) -> np.ndarray:
    """Out-of-fold 0/1 predictions so the classifier is never scored on its own training rows."""
    n = X.shape[0]
    out = np.zeros(Y.shape, dtype=np.int64)
    fold_of = np.arange(n) % folds
    for f in range(folds):
        test = fold_of == f
        if test.all() or not test.any():
            continue
        model = train(X[~test], Y[~test], cfg, names)
        out[test] = (predict(model, X[test]) >= 0.5).astype(np.int64)
    return out


def grow_calibration(
    stream: Sequence[Email],
    validation: Sequence[Email],
    schedule: CalibrationSchedule,
    evaluate: Callable[[list[Email]], float],
    delta: float = 0.01,
    patience: int = 2,
) -> GrowthResult:
    """Grow the calibration prefix until the validation score stops improving.

    ``evaluate`` profiles on the given calibration set and returns the
    validation hypervolume. Growth stops after ``patience`` consecutive
    increments each improving by less than ``delta``, or at the cap.
    """
    overlap = {e.id for e in stream} & {e.id for e in validation}
    if overlap:
        raise OverlappingSets(f"validation shares ids with the calibration stream: {sorted(overlap)[:5]}")
    history: list[tuple[int, float]] = []
    flat = 0
    sizes = sorted({min(s, len(stream)) for s in schedule.sizes()})
    for size in sizes:
        score = evaluate(list(stream[:size]))
        if history:
            flat = flat + 1 if score - history[-1][1] < delta else 0
        history.append((size, score))
        if flat >= patience:
            return GrowthResult(list(stream[:size]), history, converged=True)
    return GrowthResult(list(stream[: sizes[-1]]), history, converged=False)


@dataclass
class GrowthResult:
    calibration: list[Email]
    history: list[tuple[int, float]]
    converged: bool

    @property
    def cap_reached_without_convergence(self) -> bool:
        return not self.converged


# -- search-space accounting ---------------------------------------------------


def exhaustive_config_count(pool_size: int, grid_size: int) -> int:
    """Ordered cascades are fixed by size, so every nonempty subset S contributes grid^|S|."""
    return sum(math.comb(pool_size, k) * grid_size**k for k in range(1, pool_size + 1))


def search_space_report(
    pool_size: int,
    grid_size: int,
    subset: Sequence[str],
    reduced_grids: Sequence[Sequence[float]],
    n_calibration: int,
    n_labels: int,
    backend_calls: int,
    sweep_calls: int,
) -> dict:
    exhaustive = exhaustive_config_count(pool_size, grid_size)
    after_models = grid_size ** len(subset)
    after_pruning = math.prod(len(g) for g in reduced_grids)
    evaluated = pool_size + after_pruning
    # An exhaustive search runs at least one request per (config, email, label).
    exhaustive_calls = exhaustive * n_calibration * n_labels
    return {
        "exhaustive_configurations": exhaustive,
        "evaluated_configurations": evaluated,
        "configuration_ratio": exhaustive / evaluated,
        "exhaustive_backend_calls_lower_bound": exhaustive_calls,
        "profiling_backend_calls": backend_calls,
        "sweep_backend_calls": sweep_calls,
        "call_ratio": exhaustive_calls / backend_calls if backend_calls else None,
        "per_knob": [
            {"step": "exhaustive", "configurations": exhaustive},
            {"step": "model_subset_and_order", "configurations": after_models},
            {"step": "threshold_pruning", "configurations": after_pruning},
        ],
    }


# -- orchestration -------------------------------------------------------------


@dataclass
class ProfileResult:
    ranked: dict[str, TradeoffPoint]
    subset: list[str]
    pruning: dict[str, PruneResult]
    sweep: list[TradeoffPoint]
    cascade_choice: TradeoffPoint
    classifier: ClassifierModel | None
    classifier_f1: dict[str, float]
    methods: list[MethodDecision]
    skip_rules: list[SkipRule]
    candidates: list[TradeoffPoint]
    front: list[TradeoffPoint]
    chosen: TradeoffPoint
    plans: dict[str, LabelingPlan]
    calls: dict[str, int]
    search_space: dict
    cost_anchor: float

    @property
    def plan(self) -> LabelingPlan:
        return self.plans[self.chosen.config_hash]


@dataclass
class Profiler:
    """Drives one profiling pass (and calibration growth) against a backend."""

    backend: Backend
    schema: LabelSchema
    knobs: ProfilerKnobs
    baseline: ModelSpec
    embedding_model: str | None = None
    constraints: OperatorConstraints = field(default_factory=OperatorConstraints)
    enforce_constraints: bool = True
    training: TrainingConfig = field(default_factory=TrainingConfig)
    poor_cutoff: float = 0.5
    epsilon: float = 0.05
    min_support: float = 0.05
    method_tolerance: float = 0.02
    delta: float = 0.01

    def __post_init__(self) -> None:
        self.store = SoloStore(self.backend)
        self.evaluated: list[LabelingPlan] = []
        if self.enforce_constraints:
            self.constraints.check_registry(self.backend.specs)

    # constraint-aware views
    @property
    def active_constraints(self) -> OperatorConstraints:
        if self.enforce_constraints:
            return self.constraints
        return OperatorConstraints(tradeoff_weights=self.constraints.tradeoff_weights)

    def pool(self) -> list[str]:
        c = self.active_constraints
        names = [s.name for s in self.knobs.pool if s.kind is ModelKind.GENERATIVE and c.allows(s)]
        if not names:
            raise ConstraintViolation("no generative model survives the operator constraints")
        return self.knobs.order(names)

    def embedding_allowed(self) -> bool:
        if self.embedding_model is None:
            return False
        return self.active_constraints.allows(self.backend.spec(self.embedding_model))

    def _evaluate(self, plan: LabelingPlan, inp: EvalInputs) -> TradeoffPoint:
        self.active_constraints.check_plan(plan, self.backend.specs)
        self.evaluated.append(plan)
        return evaluate_plan_arrays(plan, inp)

    def inputs(
        self,
        emails: Sequence[Email],
        labels: Labels,
        models: Sequence[str],
        classifier: ClassifierModel | None = None,
        classifier_values: Mapping[str, np.ndarray] | None = None,
    ) -> EvalInputs:
        ids = [e.id for e in emails]
        refs = reference_arrays(labels, ids, self.schema)
        table = SoloTable.build(self.store, emails, models, self.schema)
        if self.embedding_model is not None:
            spec = self.backend.spec(self.embedding_model)
            emb_cost = np.array(
                [blended_quarters(spec, self.backend.embedding_usage(self.embedding_model, e)) for e in emails],
                dtype=np.int64,
            )
        else:
            emb_cost = np.zeros(len(emails), dtype=np.int64)
        values = dict(classifier_values or {})
        if classifier is not None and not values:
            X = np.stack([self.store.embed(self.embedding_model, e) for e in emails])
            p = predict(classifier, X)
            for j, name in enumerate(classifier.label_names):
                values[name] = (p[:, j] >= 0.5).astype(np.int64)
        base = int(baseline_quarters(emails, self.schema, self.baseline).sum())
        return EvalInputs(self.schema, table, refs, base, emb_cost, values)

    def cost_anchor(self, pool: Sequence[str]) -> float:
        """Reduction factor of the cheapest allowed model by blended price."""
        b = 3 * self.baseline.price_in + self.baseline.price_out
        cheapest = min(3 * self.backend.spec(m).price_in + self.backend.spec(m).price_out for m in pool)
        return b / cheapest if cheapest > 0 else MAX_REDUCTION

    def profile(self, calibration: Sequence[Email], labels: Labels) -> ProfileResult:
        calls_before = self.backend.total_calls
        pool = self.pool()
        # Step 1: solo runs of every allowed model (the only generative calls).
        inp = self.inputs(calibration, labels, pool)
        ranked = {}
        for m in pool:
            ranked[m] = self._evaluate(cascade_plan(self.schema, [m], [0.0]), inp)
        rank_calls = self.backend.total_calls - calls_before

        subset = select_cascade_models(ranked, self.knobs, self.active_constraints.max_cascade_size)
        pruning = {}
        for m in subset:
            conf, agree = solo_agreement(inp.table, m, inp)
            pruning[m] = prune_thresholds(conf, agree, self.knobs.grid, self.poor_cutoff)

        # Step 2: threshold sweep over cached outputs; no backend calls.
        before_sweep = self.backend.total_calls
        sweep = [
            self._evaluate(cascade_plan(self.schema, subset, combo), inp)
            for combo in itertools.product(*(pruning[m].grid for m in subset))
        ]
        sweep_calls = self.backend.total_calls - before_sweep
        anchor = self.cost_anchor(pool)
        weights = self.active_constraints.tradeoff_weights
        cascade_choice = choose_tradeoff(pareto_front(sweep), weights, 1.0, anchor)

        # Step 3: embedding classifier for the binary labels.
        binary = [lab.name for lab in self.schema.binary_labels]
        classifier = None
        clf_f1: dict[str, float] = {}
        clf_values: dict[str, np.ndarray] = {}
        before_embed = self.backend.total_calls
        if binary and self.embedding_allowed() and len(calibration) >= 2:
            X = np.stack([self.store.embed(self.embedding_model, e) for e in calibration])
            Y = np.stack([inp.references[n] for n in binary], axis=1)
            oof = cross_fit_predictions(X, Y, binary, self.training)
            for j, name in enumerate(binary):
                clf_values[name] = oof[:, j]
                clf_f1[name] = f1_arrays(oof[:, j], inp.references[name], self.schema[name])
            classifier = train(X, Y, self.training, binary)
        embed_calls = self.backend.total_calls - before_embed
        inp.classifier_values = clf_values

        methods = assign_methods(self.schema, clf_f1, cascade_choice.per_label_f1, self.method_tolerance)
        if self.knobs.methods:
            methods = [
                MethodDecision(d.label, self.knobs.methods.get(d.label, d.method), d.cascade_f1, d.classifier_f1)
                for d in methods
            ]
        rules = mine_skip_rules(labels_subset(labels, [e.id for e in calibration]), self.schema,
                                self.epsilon, self.min_support)

        # Step 4: full configurations built from the cascade front.
        plans: dict[str, LabelingPlan] = {}
        candidates = []
        method_map = {d.label: d.method for d in methods}
        uses_classifier = Method.CLASSIFIER in method_map.values()
        for sp in pareto_front(sweep):
            thresholds = next(iter(sp.config["cascades"].values()))["thresholds"]
            for rule_set in ((), tuple(rules)) if rules else ((),):
                plan = LabelingPlan(
                    methods=dict(method_map),
                    cascades={
                        n: CascadeConfig(n, tuple(subset), tuple(thresholds))
                        for n, m in method_map.items() if m is Method.CASCADE
                    },
                    skip_rules=rule_set,
                    embedding_model=self.embedding_model if uses_classifier else None,
                    classifier=classifier if uses_classifier else None,
                )
                pt = self._evaluate(plan, inp)
                if pt.config_hash not in plans:
                    plans[pt.config_hash] = plan
                    candidates.append(pt)
        front = pareto_front(candidates)
        chosen = choose_tradeoff(front, weights, 1.0, anchor)
        total_calls = self.backend.total_calls - calls_before
        calls = {
            "rank_models": rank_calls,
            "embeddings": embed_calls,
            "threshold_sweep": sweep_calls,
            "total": total_calls,
            "expected_rank_models": len(pool) * len(calibration) * len(self.schema),
        }
        space = search_space_report(
            len(pool), len(self.knobs.grid), subset, [pruning[m].grid for m in subset],
            len(calibration), len(self.schema), total_calls, sweep_calls,
        )
        return ProfileResult(
            ranked, subset, pruning, sweep, cascade_choice, classifier, clf_f1, methods, rules,
            candidates, front, chosen, plans, calls, space, anchor,
        )

    def validate(self, result: ProfileResult, validation: Sequence[Email], labels: Labels) -> list[TradeoffPoint]:
        """Re-score the front's plans on held-out emails."""
        inp = self.inputs(validation, labels, result.subset, classifier=result.classifier)
        return [evaluate_plan_arrays(result.plans[p.config_hash], inp) for p in result.front]

    def run(
        self,
        stream: Sequence[Email],
        validation: Sequence[Email],
        labels: Labels,
    ) -> tuple[ProfileResult, GrowthResult]:
        """Grow the calibration set, then return the profile on the final set."""
        results: dict[int, ProfileResult] = {}
        scale = self.cost_anchor(self.pool())

        def score(calib: list[Email]) -> float:
            res = self.profile(calib, labels)
            results[len(calib)] = res
            return hypervolume(pareto_front(self.validate(res, validation, labels)), scale)

        calls_before = self.backend.total_calls
        growth = grow_calibration(stream, validation, self.knobs.schedule, score, self.delta)
        res = results[len(growth.calibration)]
        # Account for every backend call made while growing, not just the final pass.
        res.calls["run_total"] = self.backend.total_calls - calls_before
        res.search_space = search_space_report(
            len(self.pool()), len(self.knobs.grid), res.subset, [res.pruning[m].grid for m in res.subset],
            len(growth.calibration), len(self.schema), res.calls["run_total"], res.calls["threshold_sweep"],
        )
        return res, growth


def labels_subset(labels: Labels, ids: Iterable[str]) -> Labels:
    return {i: labels[i] for i in ids if i in labels}
