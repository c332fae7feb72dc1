"""Builders shared by the test modules."""

from __future__ import annotations

from pathlib import Path

from mailcascade.backends import ConfidenceDist, MockBackend, MockModelConfig, SoloOutput
from mailcascade.config import AppConfig
from mailcascade.core import Email, LabelDef, LabelSchema, ModelKind, ModelSpec, TokenUsage
from mailcascade.mockworld import build_world, default_mock_configs, default_models
from mailcascade.profiler import CalibrationSchedule, Profiler, ProfilerKnobs


def gen(name: str, price_in: int, price_out: int, rank: int, family: str = "") -> ModelSpec:
    return ModelSpec(name, ModelKind.GENERATIVE, price_in, price_out, rank, family)


def email(eid: str, body: str = "hello there", subject: str = "hi") -> Email:
    return Email(eid, subject, body)


def mock_config(seed: int, agree: float, right=(0.9, 0.05), wrong=(0.6, 0.15), usage=None) -> MockModelConfig:
    return MockModelConfig(
        seed=seed,
        agreement_rate=agree,
        confidence_when_correct=ConfidenceDist(*right),
        confidence_when_wrong=ConfidenceDist(*wrong),
        usage_profile=usage,
    )


def default_backend(labels, seed: int = 0) -> MockBackend:
    cfg = AppConfig.from_dict(
        {
            "models": [m.to_dict() for m in default_models()],
            "baseline_model": "baseline",
            "embedding_model": "embed-1",
            "backend": {
                "kind": "mock",
                "mock_configs": {k: v.to_dict() for k, v in default_mock_configs(seed).items()},
                "embedding_dim": 32,
                "embedding_signal": 3.0,
                "signal_labels": ["NeedsReply", "IsUrgent", "NeedsAction", "NeedsScheduling"],
            },
        }
    )
    return cfg.build_backend(labels)


def default_profiler(backend, epochs: int = 15, schedule: CalibrationSchedule | None = None, **kw) -> Profiler:
    from mailcascade.classifier import TrainingConfig

    models = default_models()
    pool = [m for m in models if m.name != "baseline"]
    return Profiler(
        backend=backend,
        schema=LabelSchema.default(),
        knobs=ProfilerKnobs(pool, schedule=schedule or CalibrationSchedule()),
        baseline=next(m for m in models if m.name == "baseline"),
        embedding_model="embed-1",
        training=TrainingConfig(epochs=epochs, hidden=(64, 32), max_lr=3e-3),
        **kw,
    )


def small_world(seed: int = 0, n_stream: int = 200, n_validation: int = 100, n_eval: int = 100):
    return build_world(n_stream, n_validation, n_eval, seed)


def solo(value, conf: float, usage: TokenUsage = TokenUsage(10, 1), cost: int = 0) -> SoloOutput:
    import math

    return SoloOutput(value, (math.log(conf),) if value is not None else (), conf, cost, usage)


BINARY = LabelDef.binary("Flag")


REPORTS = [
    "profile/chosen_config.json",
    "profile/pareto.csv",
    "profile/profile_report.json",
    "label/labels.jsonl",
    "label/label_summary.json",
    "eval/evaluation_report.json",
    "load/summary.json",
    "load/ledger.csv",
]


def run_pipeline(root: Path, seed: int = 3) -> None:
    from mailcascade.cli import main

    world = root / "world"
    cfg = str(world / "config.json")
    plan = str(root / "profile" / "chosen_config.json")
    steps = [
        ["--seed", str(seed), "--out", str(world), "mock-world", "--n-stream", "200", "--n-validation", "100",
         "--n-eval", "150", "--trace-seconds", "20"],
        ["--config", cfg, "--out", str(root / "profile"), "profile"],
        ["--config", cfg, "--out", str(root / "label"), "label", "--plan", plan],
        ["--config", cfg, "--out", str(root / "eval"), "evaluate", "--plan", plan,
         "--labels", str(root / "label" / "labels.jsonl"), "--summary", str(root / "label" / "label_summary.json")],
        ["--config", cfg, "--out", str(root / "load"), "simulate-load", "--plan", plan],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
