"""Seeded synthetic inboxes with correlated baseline labels, for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backends import ConfidenceDist, MockModelConfig
from .core import Email, LabelSchema, Labels, ModelKind, ModelSpec

_WORDS = (
    "meeting budget review deadline invoice contract draft schedule update report quarterly "
    "client vendor approval urgent follow reminder agenda call minutes proposal travel expense "
    "policy security incident release launch hiring interview offer feedback survey lunch team "
    "project milestone status risk blocker question request confirm cancel reschedule attached"
).split()


@dataclass(frozen=True)
class TruthModel:
    """Priority drawn from ``priority_dist``; each binary label drawn independently given Priority."""

    priority_dist: tuple[float, ...] = (0.15, 0.25, 0.30, 0.20, 0.10)
    binary_given_priority: Mapping[str, tuple[float, ...]] = field(
        default_factory=lambda: {
            "NeedsReply": (0.30, 0.50, 0.60, 0.70, 0.80),
            "IsUrgent": (0.10, 0.20, 0.40, 0.97, 0.85),
            "NeedsAction": (0.20, 0.40, 0.50, 0.60, 0.70),
            "NeedsScheduling": (0.30, 0.02, 0.30, 0.40, 0.35),
        }
    )

    def sample(self, email_ids: Sequence[str], schema: LabelSchema, seed: int) -> Labels:
        rng = np.random.default_rng([seed, 1])
        n = len(email_ids)
        classes = schema["Priority"].classes
        pr_idx = rng.choice(len(classes), size=n, p=np.asarray(self.priority_dist) / sum(self.priority_dist))
        out: Labels = {eid: {"Priority": int(classes[i])} for eid, i in zip(email_ids, pr_idx)}
        for lab in schema:
            if lab.name == "Priority":
                continue
            probs = np.asarray(self.binary_given_priority.get(lab.name, (0.5,) * len(classes)))
            draws = rng.random(n) < probs[pr_idx]
            for eid, v in zip(email_ids, draws):
                out[eid][lab.name] = int(v)
        return out


def generate_emails(n: int, seed: int, prefix: str = "e") -> list[Email]:
    rng = np.random.default_rng([seed, 0])
    emails = []
    for i in range(n):
        words = rng.choice(_WORDS, size=int(rng.integers(20, 200)))
        subject = " ".join(rng.choice(_WORDS, size=int(rng.integers(2, 8))))
        emails.append(
            Email(
                id=f"{prefix}{i:06d}",
                subject=subject.capitalize(),
                body=" ".join(words),
                metadata={"sender": f"user{int(rng.integers(50))}@example.com", "timestamp": str(1_700_000_000 + 37 * i)},
            )
        )
    return emails


def default_models() -> list[ModelSpec]:
    """Five generative models priced 105/100/90/20/10x below the baseline, one embedder, the baseline."""
    g = ModelKind.GENERATIVE
    return [
        ModelSpec("slm-1", g, 30, 50, 1, "alpha"),
        ModelSpec("slm-2", g, 32, 51, 2, "beta"),
        ModelSpec("slm-3", g, 35, 58, 3, "alpha"),
        ModelSpec("slm-4", g, 160, 255, 4, "gamma"),
        ModelSpec("slm-5", g, 320, 510, 5, "beta"),
        ModelSpec("embed-1", ModelKind.EMBEDDING, 2, 0, 50, "embed"),
        ModelSpec("baseline", g, 2100, 8400, 100, "frontier"),
    ]


def default_mock_configs(seed: int = 0) -> dict[str, MockModelConfig]:
    def cfg(i: int, agree: float, right: tuple[float, float], wrong: tuple[float, float]) -> MockModelConfig:
        return MockModelConfig(
            seed=seed * 1000 + i,
            agreement_rate=agree,
            confidence_when_correct=ConfidenceDist(*right),
            confidence_when_wrong=ConfidenceDist(*wrong),
        )

    return {
        "slm-1": cfg(1, 0.70, (0.86, 0.08), (0.58, 0.14)),
        "slm-2": cfg(2, 0.66, (0.84, 0.09), (0.60, 0.14)),
        "slm-3": cfg(3, 0.78, (0.87, 0.07), (0.60, 0.13)),
        "slm-4": cfg(4, 0.88, (0.90, 0.06), (0.62, 0.12)),
        "slm-5": cfg(5, 0.94, (0.93, 0.05), (0.65, 0.12)),
        "embed-1": cfg(6, 1.0, (1.0, 0.0), (1.0, 0.0)),
        "baseline": cfg(7, 1.0, (0.99, 0.005), (0.99, 0.005)),
    }


@dataclass
class MockWorld:
    stream: list[Email]
    validation: list[Email]
    evaluation: list[Email]
    labels: Labels

    @property
    def all_emails(self) -> list[Email]:
        return [*self.stream, *self.validation, *self.evaluation]


def build_world(
    n_stream: int = 400,
    n_validation: int = 200,
    n_eval: int = 400,
    seed: int = 0,
    truth: TruthModel | None = None,
    schema: LabelSchema | None = None,
) -> MockWorld:
    schema = schema or LabelSchema.default()
    emails = generate_emails(n_stream + n_validation + n_eval, seed)
    labels = (truth or TruthModel()).sample([e.id for e in emails], schema, seed)
    return MockWorld(
        emails[:n_stream],
        emails[n_stream : n_stream + n_validation],
        emails[n_stream + n_validation :],
        labels,
    )
