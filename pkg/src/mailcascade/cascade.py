"""Runtime labeling: confidence-thresholded model cascades and cross-label skip rules."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

from .backends import Backend, BackendUnavailable, MalformedOutput
from .core import Email, LabelDef, LabelSchema, LabelValue, MailCascadeError, ModelSpec, TokenUsage, request_cost

if TYPE_CHECKING:
    from .classifier import ClassifierModel


class EmptyLogprobs(MailCascadeError):
    pass


class CascadeConfigError(MailCascadeError):
    pass


def logprob_to_confidence(token_logprobs: Sequence[float]) -> float:
    """Geometric mean of the token probabilities, i.e. exp(mean logprob)."""
    if not token_logprobs:
        raise EmptyLogprobs("cannot derive a confidence from zero tokens")
    return math.exp(math.fsum(token_logprobs) / len(token_logprobs))


@dataclass(frozen=True)
class CascadeConfig:
    label_name: str
    models: tuple[str, ...]
    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.models:
            raise CascadeConfigError("a cascade needs at least one model")
        if len(self.models) != len(self.thresholds):
            raise CascadeConfigError("thresholds and models differ in length")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise CascadeConfigError("thresholds must lie in [0, 1]")

    def validate(self, specs: Mapping[str, ModelSpec]) -> None:
        missing = [m for m in self.models if m not in specs]
        if missing:
            raise CascadeConfigError(f"unknown cascade models {missing}")
        ranks = [specs[m].size_rank for m in self.models]
        if any(a >= b for a, b in zip(ranks, ranks[1:])):
            raise CascadeConfigError("cascade models must be ordered by strictly increasing size_rank")

    def to_dict(self) -> dict:
        return {"label_name": self.label_name, "models": list(self.models), "thresholds": list(self.thresholds)}

    @classmethod
    def from_dict(cls, d: Mapping) -> CascadeConfig:
        return cls(d["label_name"], tuple(d["models"]), tuple(d["thresholds"]))


@dataclass(frozen=True)
class CascadeAttempt:
    model: str
    confidence: float
    value: int | None
    cost: int
    usage: TokenUsage = TokenUsage()

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "confidence": self.confidence,
            "value": self.value,
            "cost": self.cost,
            "usage": [self.usage.input_tokens, self.usage.output_tokens],
        }


@dataclass(frozen=True)
class CascadeTrace:
    email_id: str
    label_name: str
    attempts: tuple[CascadeAttempt, ...]
    chosen_model: str
    chosen_value: LabelValue
    total_cost: int
    fell_through: bool

    def to_dict(self) -> dict:
        return {
            "email_id": self.email_id,
            "label_name": self.label_name,
            "attempts": [a.to_dict() for a in self.attempts],
            "chosen_model": self.chosen_model,
            "chosen_value": self.chosen_value.value,
            "total_cost": self.total_cost,
            "fell_through": self.fell_through,
        }


def run_cascade(email: Email, cfg: CascadeConfig, backend: Backend, label: LabelDef) -> CascadeTrace:
    """Walk ``cfg.models`` in order, stopping at the first model whose confidence meets its threshold.

    When nothing passes, the last (largest) model's value is kept and the
    trace is marked ``fell_through``. A malformed answer counts as confidence 0.
    """
    attempts: list[CascadeAttempt] = []
    for model, threshold in zip(cfg.models, cfg.thresholds):
        spec = backend.spec(model)
        try:
            result = backend.generate_label(model, email, label)
        except MalformedOutput as exc:
            attempts.append(CascadeAttempt(model, 0.0, None, request_cost(spec, exc.usage), exc.usage))
            continue
        except BackendUnavailable as exc:
            exc.trace = tuple(attempts)
            raise
        conf = logprob_to_confidence(result.token_logprobs)
        attempts.append(CascadeAttempt(model, conf, result.value.value, request_cost(spec, result.usage), result.usage))
        if conf >= threshold:
            return _trace(email, label, attempts, fell_through=False)
    return _trace(email, label, attempts, fell_through=True)


def _trace(email: Email, label: LabelDef, attempts: list[CascadeAttempt], fell_through: bool) -> CascadeTrace:
    valid = [a.value for a in attempts if a.value is not None]
    # Every model malformed: fall back to the lowest class.
    value = valid[-1] if valid else label.classes[0]
    return CascadeTrace(
        email_id=email.id,
        label_name=label.name,
        attempts=tuple(attempts),
        chosen_model=attempts[-1].model,
        chosen_value=LabelValue(label.name, value),
        total_cost=sum(a.cost for a in attempts),
        fell_through=fell_through,
    )


# -- skip rules and full-email labeling ---------------------------------------


@dataclass(frozen=True)
class SkipRule:
    condition: tuple[str, int]
    consequence: tuple[str, int]
    support: float
    confidence: float

    def to_dict(self) -> dict:
        return {
            "condition": list(self.condition),
            "consequence": list(self.consequence),
            "support": self.support,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SkipRule:
        c, q = d["condition"], d["consequence"]
        return cls((c[0], int(c[1])), (q[0], int(q[1])), float(d["support"]), float(d["confidence"]))


class Method(enum.Enum):
    CASCADE = "cascade"
    CLASSIFIER = "classifier"


class Provenance(enum.Enum):
    CASCADE = "cascade"
    CLASSIFIER = "classifier"
    SKIPPED = "skipped"


@dataclass
class LabelingPlan:
    """Everything needed to label an email: method per label, cascades, classifier, skip rules."""

    methods: dict[str, Method]
    cascades: dict[str, CascadeConfig] = field(default_factory=dict)
    skip_rules: tuple[SkipRule, ...] = ()
    embedding_model: str | None = None
    classifier: ClassifierModel | None = None

    def validate(self, schema: LabelSchema, specs: Mapping[str, ModelSpec]) -> None:
        for lab in schema:
            method = self.methods.get(lab.name)
            if method is None:
                raise CascadeConfigError(f"plan has no method for {lab.name!r}")
            if method is Method.CASCADE:
                if lab.name not in self.cascades:
                    raise CascadeConfigError(f"plan has no cascade for {lab.name!r}")
                self.cascades[lab.name].validate(specs)
            elif not lab.is_binary:
                raise CascadeConfigError(f"classifier cannot label multiclass {lab.name!r}")
            elif self.embedding_model is None:
                raise CascadeConfigError("classifier labels need an embedding model")
        for rule in self.skip_rules:
            if schema.index(rule.condition[0]) >= schema.index(rule.consequence[0]):
                raise CascadeConfigError(f"skip rule {rule} does not point forward in schema order")

    def to_dict(self) -> dict:
        return {
            "methods": {k: v.value for k, v in self.methods.items()},
            "cascades": {k: v.to_dict() for k, v in self.cascades.items()},
            "skip_rules": [r.to_dict() for r in self.skip_rules],
            "embedding_model": self.embedding_model,
        }

    @classmethod
    def from_dict(cls, d: Mapping, classifier: ClassifierModel | None = None) -> LabelingPlan:
        return cls(
            methods={k: Method(v) for k, v in d["methods"].items()},
            cascades={k: CascadeConfig.from_dict(v) for k, v in d.get("cascades", {}).items()},
            skip_rules=tuple(SkipRule.from_dict(r) for r in d.get("skip_rules", [])),
            embedding_model=d.get("embedding_model"),
            classifier=classifier,
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class LabelOutcome:
    value: LabelValue
    provenance: Provenance
    cost: int
    trace: CascadeTrace | None = None


def label_email(
    email: Email,
    schema: LabelSchema,
    plan: LabelingPlan,
    backend: Backend,
) -> list[LabelOutcome]:
    """Label one email in schema order, honoring skip rules before dispatching."""
    from .classifier import predict

    assigned: dict[str, int] = {}
    outcomes: list[LabelOutcome] = []
    probs: dict[str, float] | None = None
    for lab in schema:
        skipped = _skip_value(lab.name, assigned, plan.skip_rules)
        if skipped is not None:
            out = LabelOutcome(LabelValue(lab.name, skipped), Provenance.SKIPPED, 0)
        elif plan.methods[lab.name] is Method.CASCADE:
            trace = run_cascade(email, plan.cascades[lab.name], backend, lab)
            out = LabelOutcome(trace.chosen_value, Provenance.CASCADE, trace.total_cost, trace)
        else:
            cost = 0
            if probs is None:
                if plan.classifier is None or plan.embedding_model is None:
                    raise CascadeConfigError("plan routes a label to a classifier it does not have")
                vec, cost = backend.embed_with_cost(plan.embedding_model, email)
                p = predict(plan.classifier, vec)
                probs = dict(zip(plan.classifier.label_names, p.tolist()))
            out = LabelOutcome(LabelValue(lab.name, int(probs[lab.name] >= 0.5)), Provenance.CLASSIFIER, cost)
        assigned[lab.name] = out.value.value
        outcomes.append(out)
    return outcomes


def _skip_value(label: str, assigned: Mapping[str, int], rules: Sequence[SkipRule]) -> int | None:
    for rule in rules:
        if rule.consequence[0] != label:
            continue
        cond_label, cond_value = rule.condition
        if assigned.get(cond_label) == cond_value:
            return rule.consequence[1]
    return None
