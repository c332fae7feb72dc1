"""Command-line entry point: mock-world, profile, label, evaluate, simulate-load, drift-check."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from . import classifier as clf
from .backends import BackendError
from .cascade import LabelingPlan, Method, Provenance, label_email
from .config import AppConfig, ConfigError
from .core import (
    DatasetError,
    MailCascadeError,
    SchemaError,
    TokenUsage,
    read_emails,
    read_labels,
    write_emails,
    write_labels,
)
from .drift import DegenerateReference, DriftState, should_reprofile
from .metrics import evaluate as evaluate_report
from .metrics import oracle_cascade_f1
from .mockworld import TruthModel, build_world, default_mock_configs, default_models
from .profiler import (
    ConstraintViolation,
    Profiler,
    ProfilerError,
    ProfilerKnobs,
    SoloStore,
    baseline_quarters,
    blended_quarters,
)
from .provisioner import (
    Arrival,
    ProvisionCostModel,
    ProvisioningState,
    TraceError,
    assign_entries,
    initial_instances,
    load_policies,
    peak_trace,
    read_trace,
    simulate_load,
    write_ledger,
    write_trace,
)

logger = logging.getLogger("mailcascade")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND = 0, 2, 3

#: Request size used to price running cost per request when the config gives none.
TYPICAL_USAGE = TokenUsage(300, 1)


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_config(args) -> AppConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return AppConfig.load(args.config)


def _truth(cfg: AppConfig):
    if "baseline_labels" in cfg.data and cfg.path("baseline_labels").exists():
        return read_labels(cfg.path("baseline_labels"))
    return {}


# -- mock-world ----------------------------------------------------------------


def default_config_dict(seed: int) -> dict:
    models = default_models()
    return {
        "seed": seed,
        "models": [m.to_dict() for m in models],
        "baseline_model": "baseline",
        "embedding_model": "embed-1",
        "backend": {
            "kind": "mock",
            "mock_configs": {k: v.to_dict() for k, v in default_mock_configs(seed).items()},
            "embedding_dim": 32,
            "embedding_signal": 3.0,
            "signal_labels": ["NeedsReply", "IsUrgent", "NeedsAction", "NeedsScheduling"],
        },
        "data": {
            "stream": "stream.jsonl",
            "validation": "validation.jsonl",
            "eval": "eval.jsonl",
            "baseline_labels": "baseline_labels.jsonl",
            "trace": "trace.csv",
            "policies": "policies.json",
        },
        "profiler": {
            "calibration": {"initial": 100, "increment": 100, "cap": 400},
            "poor_quality_cutoff": 0.5,
            "delta": 0.01,
            "skip_rules": {"epsilon": 0.05, "min_support": 0.05},
            "method_tolerance": 0.02,
        },
        "enforce_constraints": True,
        "available_model_pool": ["slm-1", "slm-2", "slm-3", "slm-4", "slm-5", "embed-1"],
        "constraints": {"banned_families": [], "max_cascade_size": 3, "tradeoff_weights": [1.0, 1.0]},
        "training": {"epochs": 30},
        "drift": {"period_s": 86400.0, "swd_threshold": 1.0, "window": 1000},
        "provisioning": {
            "p": 2,
            "capacity": 4,
            "d_req": 1,
            "service_ms": 1000.0,
            "base_rate_per_s": 20.0,
            "bottleneck": [1, 2, 3],
        },
    }


def cmd_mock_world(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(args.n_stream, args.n_validation, args.n_eval, args.seed, TruthModel())
    write_emails(out / "stream.jsonl", world.stream)
    write_emails(out / "validation.jsonl", world.validation)
    write_emails(out / "eval.jsonl", world.evaluation)
    write_labels(out / "baseline_labels.jsonl", world.labels)
    arrivals = peak_trace(args.trace_seconds, 20.0, 60.0, (args.trace_seconds / 3, 2 * args.trace_seconds / 3),
                          seed=args.seed, groups=("default", "default", "batch", "bulk"))
    ids = [e.id for e in world.evaluation]
    write_trace(out / "trace.csv", [Arrival(a.time_ms, ids[i % len(ids)], a.group) for i, a in enumerate(arrivals)])
    _dump(out / "policies.json", [
        {"group": "batch", "kind": "delay_stagger", "kappa": 1.0},
        {"group": "bulk", "kind": "quality_downgrade", "target": 1},
    ])
    _dump(out / "config.json", default_config_dict(args.seed))
    print(f"wrote mock world to {out}")
    return EXIT_OK


# -- profile -------------------------------------------------------------------


def _profiler(cfg: AppConfig, backend) -> Profiler:
    p = cfg.profiler
    rules = p.get("skip_rules", {})
    pool = [m for m in cfg.models if m.name != cfg.baseline_model]
    return Profiler(
        backend=backend,
        schema=cfg.schema,
        knobs=ProfilerKnobs(pool, cfg.grid, schedule=cfg.schedule),
        baseline=cfg.spec(cfg.baseline_model),
        embedding_model=cfg.embedding_model,
        constraints=cfg.operator_constraints(),
        enforce_constraints=cfg.enforce_constraints,
        training=cfg.training,
        poor_cutoff=float(p.get("poor_quality_cutoff", 0.5)),
        epsilon=float(rules.get("epsilon", 0.05)),
        min_support=float(rules.get("min_support", 0.05)),
        method_tolerance=float(p.get("method_tolerance", 0.02)),
        delta=float(p.get("delta", 0.01)),
    )


def cmd_profile(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = _truth(cfg)
    backend = cfg.build_backend(labels)
    prof = _profiler(cfg, backend)
    stream = read_emails(cfg.path("stream"))
    validation = read_emails(cfg.path("validation"))
    res, growth = prof.run(stream, validation, labels)

    with (out / "pareto.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quality", "cost_reduction", "config_hash"])
        for p in res.front:
            w.writerow([repr(p.quality), repr(p.cost_reduction), p.config_hash])
    plan = res.plan
    clf_path = None
    if plan.classifier is not None:
        clf_path = "classifier.bin"
        clf.save(plan.classifier, out / clf_path)
    _dump(out / "chosen_config.json", {
        "plan": plan.to_dict(),
        "config_hash": res.chosen.config_hash,
        "classifier_path": clf_path,
        "cascade_models": res.subset,
        "quality": res.chosen.quality,
        "cost_reduction": res.chosen.cost_reduction,
        "per_label_f1": res.chosen.per_label_f1,
        "usage_fractions": res.chosen.usage_fractions,
    })
    _dump(out / "profile_report.json", {
        "calibration_growth": [{"size": s, "validation_hypervolume": v} for s, v in growth.history],
        "calibration_converged": growth.converged,
        "cap_reached_without_convergence": growth.cap_reached_without_convergence,
        "calls": res.calls,
        "search_space": res.search_space,
        "solo_models": {m: {"quality": p.quality, "cost_reduction": p.cost_reduction} for m, p in res.ranked.items()},
        "cascade_models": res.subset,
        "threshold_floors": {m: r.floor for m, r in res.pruning.items()},
        "reduced_grids": {m: list(r.grid) for m, r in res.pruning.items()},
        "methods": [
            {"label": d.label, "method": d.method.value, "cascade_f1": d.cascade_f1, "classifier_f1": d.classifier_f1}
            for d in res.methods
        ],
        "skip_rules": [r.to_dict() for r in res.skip_rules],
        "front_size": len(res.front),
        "candidates": len(res.candidates),
    })
    # Reference confidence sample for drift checks: first cascade model, calibration emails.
    first = res.subset[0]
    ref = [o.confidence for (m, _, _), o in sorted(prof.store.outputs.items()) if m == first and o.value is not None]
    DriftState(
        ref,
        float(args.now),
        float(cfg.drift.get("period_s", 86400.0)),
        float(cfg.drift.get("swd_threshold", 1.0)),
    ).save(out / "drift_state.json")
    print(f"chosen {res.chosen.config_hash}: quality {res.chosen.quality:.4f}, "
          f"cost reduction {res.chosen.cost_reduction:.1f}x")
    return EXIT_OK


# -- label ---------------------------------------------------------------------


def _load_plan(path: Path) -> tuple[LabelingPlan, dict]:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from exc
    model = None
    if doc.get("classifier_path"):
        model = clf.load(path.parent / doc["classifier_path"])
    return LabelingPlan.from_dict(doc["plan"], classifier=model), doc


def cmd_label(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan, doc = _load_plan(Path(args.plan))
    plan.validate(cfg.schema, cfg.specs)
    backend = cfg.build_backend(_truth(cfg))
    emails = read_emails(args.emails or cfg.path("eval"))
    labels = {}
    cost = 0
    usage: dict[str, int] = {}
    requests = 0
    recent = []
    with (out / "traces.jsonl").open("w") as fh:
        for e in emails:
            outcomes = label_email(e, cfg.schema, plan, backend)
            labels[e.id] = {o.value.label_name: o.value.value for o in outcomes}
            embedded = False
            for o in outcomes:
                if o.trace is not None:
                    fh.write(json.dumps(o.trace.to_dict(), sort_keys=True) + "\n")
                    cost += sum(blended_quarters(backend.spec(a.model), a.usage) for a in o.trace.attempts)
                    usage[o.trace.chosen_model] = usage.get(o.trace.chosen_model, 0) + 1
                    requests += 1
                    recent.append(o.trace.attempts[0].confidence)
                elif o.provenance is Provenance.CLASSIFIER and not embedded:
                    cost += blended_quarters(
                        backend.spec(plan.embedding_model), backend.embedding_usage(plan.embedding_model, e)
                    )
                    embedded = True
    write_labels(out / "labels.jsonl", labels, cfg.schema)
    base = int(baseline_quarters(emails, cfg.schema, cfg.spec(cfg.baseline_model)).sum())
    _dump(out / "label_summary.json", {
        "config_hash": plan.config_hash(),
        "emails": len(emails),
        "method_cost_quarter_micro": cost,
        "baseline_cost_quarter_micro": base,
        "billed_micro": backend.total_billed,
        "backend_calls": dict(sorted(backend.calls.items())),
        "usage_fractions": {m: c / requests for m, c in sorted(usage.items())} if requests else {},
        "emails_path": str(Path(args.emails).resolve()) if args.emails else None,
    })
    _dump(out / "recent_confidences.json", recent[-int(cfg.drift.get("window", 1000)):])
    print(f"labeled {len(emails)} emails")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan, _ = _load_plan(Path(args.plan))
    summary = json.loads(Path(args.summary).read_text())
    predictions = read_labels(args.labels)
    references = read_labels(args.references) if args.references else _truth(cfg)
    references = {i: references[i] for i in predictions if i in references}
    missing = set(predictions) - set(references)
    if missing:
        raise DatasetError(f"{len(missing)} labeled emails have no reference labels")
    emails = read_emails(summary.get("emails_path") or cfg.path("eval"))
    emails = [e for e in emails if e.id in predictions]

    # Oracle reference over the plan's cascade labels, from solo outputs.
    backend = cfg.build_backend(_truth(cfg))
    store = SoloStore(backend)
    oracle = []
    for name, cc in sorted(plan.cascades.items()):
        if plan.methods.get(name) is not Method.CASCADE:
            continue
        lab = cfg.schema[name]
        outs = [[store.get(m, e, lab).value for e in emails] for m in cc.models]
        outs = [[lab.classes[0] if v is None else v for v in row] for row in outs]
        oracle.append(oracle_cascade_f1(outs, [references[e.id][name] for e in emails], lab))
    total = sum(Fraction(v) for v in oracle)
    report = evaluate_report(
        predictions,
        references,
        cfg.schema,
        method_cost=summary["method_cost_quarter_micro"],
        baseline_cost=summary["baseline_cost_quarter_micro"],
        config_hash=summary["config_hash"],
        oracle_f1=float(total / len(oracle)) if oracle else None,
        usage_fractions=summary.get("usage_fractions", {}),
    )
    (out / "evaluation_report.json").write_text(report.to_json())
    print(f"average F1 {report.average_f1:.4f}, cost reduction {report.cost_reduction_factor:.1f}x")
    return EXIT_OK


# -- simulate-load -------------------------------------------------------------


def _int_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_simulate_load(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = cfg.provisioning
    doc = json.loads(Path(args.plan).read_text())
    models = doc["cascade_models"]
    fractions = doc.get("usage_fractions") or {}
    usage = [float(fractions.get(m, 0.0)) for m in models]
    if sum(usage) <= 0:
        usage = [1.0] + [0.0] * (len(models) - 1)
    p = Fraction(str(args.p if args.p is not None else prov.get("p", 2)))
    cap = Fraction(str(args.capacity if args.capacity is not None else prov.get("capacity", 4)))
    bottleneck = _int_list(args.bottleneck) or prov.get("bottleneck") or list(range(1, len(models) + 1))
    # Models outside the bottleneck set get effectively unlimited capacity.
    capacity = [cap if i + 1 in bottleneck else Fraction(10**9) for i in range(len(models))]
    specs = [cfg.spec(m) for m in models]
    z = prov.get("run_cost") or [blended_quarters(s, TYPICAL_USAGE) for s in specs]
    c = prov.get("instance_cost") or [50 * zi for zi in z]
    service_ms = float(prov.get("service_ms", 1000.0))
    cm = ProvisionCostModel(c, z, p, capacity, prov.get("d_req", 1))
    rate = float(prov.get("base_rate_per_s", 20.0))
    n0 = initial_instances(usage, rate, service_ms, [float(x) for x in capacity], float(cm.d_req))
    initial = ProvisioningState(n0, [0] * len(models))
    arrivals = assign_entries(read_trace(args.trace or cfg.path("trace")), usage)
    policies = {}
    pol_path = args.policies or (cfg.path("policies") if "policies" in cfg.data else None)
    if pol_path is not None and Path(pol_path).exists():
        policies = load_policies(pol_path)
    report = simulate_load(arrivals, initial, cm, policies, service_ms)
    write_ledger(out / "ledger.csv", report.greedy.ledger)
    summary = report.summary()
    summary["parameters"] = {
        "p": str(p), "capacity": str(cap), "bottleneck": bottleneck, "models": models,
        "instance_cost": list(c), "run_cost": list(z), "initial_instances": n0, "service_ms": service_ms,
    }
    _dump(out / "summary.json", summary)
    print(json.dumps(summary["baseline_over_greedy_increase"], sort_keys=True))
    return EXIT_OK


# -- drift-check ---------------------------------------------------------------


def cmd_drift_check(args) -> int:
    cfg = _load_config(args)
    state = DriftState.load(args.state)
    recent = json.loads(Path(args.recent).read_text())
    decision = should_reprofile(state, float(args.now), [float(v) for v in recent])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "drift_decision.json", {
            "decision": str(decision), "swd": decision.swd, "now": float(args.now),
            "swd_threshold": state.swd_threshold, "period": state.period,
        })
    print(decision)
    del cfg
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mailcascade", description=__doc__)
    parser.add_argument("--config", help="main JSON config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mock-world", help="generate a seeded synthetic dataset and config")
    p.add_argument("--n-stream", type=int, default=400)
    p.add_argument("--n-validation", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=400)
    p.add_argument("--trace-seconds", type=float, default=60.0)
    p.set_defaults(func=cmd_mock_world)

    p = sub.add_parser("profile", help="profile the knob space and choose a configuration")
    p.add_argument("--now", type=float, default=0.0, help="profiling time in seconds, stored for drift checks")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("label", help="label emails with a chosen configuration")
    p.add_argument("--plan", required=True)
    p.add_argument("--emails")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("evaluate", help="score labels against baseline labels")
    p.add_argument("--plan", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument("--references")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate-load", help="replay a request trace through the provisioner")
    p.add_argument("--plan", required=True, help="chosen_config.json from profile")
    p.add_argument("--trace")
    p.add_argument("--p", type=float)
    p.add_argument("--capacity", type=float)
    p.add_argument("--bottleneck", help="comma-separated 1-based cascade positions")
    p.add_argument("--policies")
    p.set_defaults(func=cmd_simulate_load)

    p = sub.add_parser("drift-check", help="decide whether to re-profile")
    p.add_argument("--state", required=True)
    p.add_argument("--recent", required=True, help="JSON list of recent confidences")
    p.add_argument("--now", type=float, required=True, help="current time in seconds")
    p.set_defaults(func=cmd_drift_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConfigError, ConstraintViolation, ProfilerError, SchemaError, DatasetError, TraceError,
            DegenerateReference, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MailCascadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
