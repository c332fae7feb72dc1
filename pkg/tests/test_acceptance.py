"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

from __future__ import annotations

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import truncnorm

from helpers import REPORTS, default_backend, record, run_pipeline, small_world
from mailcascade.backends import ConfidenceDist, MockBackend, MockModelConfig
from mailcascade.cascade import CascadeConfig, LabelingPlan, Method, SkipRule, label_email
from mailcascade.classifier import (
    AdamState,
    TrainingConfig,
    adam_step,
    gradient_check,
    init_model,
    predict,
    predict_values,
    train,
)
from mailcascade.core import Email, LabelDef, LabelSchema, ModelKind, ModelSpec, TokenUsage
from mailcascade.drift import DriftState, Reason, should_reprofile, swd
from mailcascade.metrics import f1_binary, f1_macro, label_f1, oracle_cascade_f1
from mailcascade.mockworld import build_world, default_models
from mailcascade.profiler import (
    CalibrationSchedule,
    EvalInputs,
    Profiler,
    ProfilerKnobs,
    SoloStore,
    SoloTable,
    blended_quarters,
    choose_tradeoff,
    mine_skip_rules,
    pareto_front,
    point,
    reference_arrays,
    sweep_thresholds,
)
from mailcascade.provisioner import (
    ProvisionCostModel,
    ProvisioningState,
    Strategy,
    allocate_request,
    assign_entries,
    brute_force_min_cost,
    initial_instances,
    peak_trace,
    run_requests,
    simulate_load,
    total_cost,
)

SPECS = {m.name: m for m in default_models()}
HOUR = 3600.0


def check(number: int, ok: bool, detail: str) -> None:
    record(number, ok, detail)
    assert ok, detail


# -- 1. greedy allocator against the exhaustive optimum -----------------------


def enumerate_min_cost(cm: ProvisionCostModel, n_requests: int) -> Fraction:
    """Plain enumeration of every per-request model choice (independent of the memoized search)."""
    best = None
    for seq in itertools.product(range(cm.m), repeat=n_requests):
        n, k = [1] * cm.m, [0] * cm.m
        for j in seq:
            if k[j] + 1 > n[j] * cm.capacity[j]:
                n[j] += 1
            k[j] += 1
        v = total_cost(ProvisioningState(n, k), cm).total
        best = v if best is None or v < best else best
    return best


def random_instance(rng: np.random.Generator) -> tuple[ProvisionCostModel, int]:
    m = int(rng.choice([2, 3]))
    c = [int(v) for v in rng.integers(1, 13, m)]
    z = sorted(int(v) for v in rng.choice(np.arange(1, 31), m, replace=False))
    p = [Fraction(3, 2), 2, 5][int(rng.integers(3))]
    return ProvisionCostModel(c, z, p, int(rng.integers(1, 4))), int(rng.integers(1, 13))


def test_c01_greedy_matches_exhaustive_optimum():
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    mismatches, checked, worst = 0, 0, None
    for _ in range(500):
        cm, n_req = random_instance(rng)
        init = ProvisioningState([1] * cm.m, [0] * cm.m)
        greedy = total_cost(run_requests(init, cm, n_req), cm).total
        optimum = brute_force_min_cost(init, cm, n_req)
        if cm.m ** n_req <= 3**7:
            assert enumerate_min_cost(cm, n_req) == optimum
            checked += 1
        assert optimum <= greedy
        if greedy != optimum:
            mismatches += 1
            gap = greedy / optimum
            if worst is None or gap > worst[0]:
                worst = (gap, list(cm.c), list(cm.z), cm.p, [int(v) for v in cm.capacity], n_req, greedy, optimum)
    elapsed = time.perf_counter() - t0
    detail = f"{mismatches}/500 instances where greedy exceeds the optimum ({checked} cross-enumerated), {elapsed:.1f}s"
    if worst:
        gap, c, z, p, cap, n_req, g, o = worst
        detail += f"; worst ratio {float(gap):.2f}: c={c} z={z} p={p} C={cap} requests={n_req} greedy={g} optimum={o}"
    check(1, mismatches == 0 and elapsed < 60, detail)


# -- 2, 3. worked trace and cost formula ---------------------------------------


def test_c02_hand_traced_scenario():
    cm = ProvisionCostModel([1, 4], [1, 2], 2, 2)
    s = ProvisioningState([1, 1], [0, 0])
    for _ in range(5):
        allocate_request(s, cm)
    total = total_cost(s, cm).total
    check(2, total == 21 and s.n == [1, 2] and s.k == [2, 3], f"total={total} n={s.n} k={s.k}")


def test_c03_total_cost_formula():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        c = [int(v) for v in rng.integers(1, 50, m)]
        z = sorted(int(v) for v in rng.choice(np.arange(1, 100), m, replace=False))
        p = [Fraction(3, 2), 2, 3, 5, Fraction(7, 4)][int(rng.integers(5))]
        n = [int(v) for v in rng.integers(1, 9, m)]
        k = [int(v) for v in rng.integers(0, 40, m)]
        cm = ProvisionCostModel(c, z, p, 1)
        closed = sum(Fraction(ci) * (Fraction(p) ** ni - 1) / (Fraction(p) - 1) for ci, ni in zip(c, n))
        looped = sum(ci * Fraction(p) ** j for ci, ni in zip(c, n) for j in range(ni))
        run = sum(ki * zi for ki, zi in zip(k, z))
        got = total_cost(ProvisioningState(n, k), cm).total
        bad += not (got == closed + run == looped + run)
    check(3, bad == 0, f"{1000 - bad}/1000 random states exact")


# -- 4. greedy against the baselines under peak load ---------------------------


def bottleneck_report(p: int, bottleneck: int):
    names = ("slm-1", "slm-3", "slm-5")
    usage = (0.6, 0.3, 0.1)
    z = [blended_quarters(SPECS[m], TokenUsage(300, 1)) for m in names]
    c = [50 * zi for zi in z]
    roomy = 10**6
    capacity = [4 if i < bottleneck else roomy for i in range(3)]
    cm = ProvisionCostModel(c, z, p, capacity)
    arrivals = assign_entries(peak_trace(60, 20.0, 60.0, (20, 40), seed=11), usage)
    n0 = initial_instances(usage, 20.0, 1000.0, capacity)
    return simulate_load(arrivals, ProvisioningState(n0, [0, 0, 0]), cm, service_ms=1000.0)


def test_c04_greedy_never_costs_more_than_baselines():
    t0 = time.perf_counter()
    cells, ok = [], True
    for bottleneck in (1, 3):
        for p in (2, 5):
            report = bottleneck_report(p, bottleneck)
            g = report.greedy.increase
            prov = report.runs[Strategy.ALWAYS_PROVISION].increase
            esc = report.runs[Strategy.ALWAYS_ESCALATE].increase
            cell_ok = g <= prov and g <= esc
            ok &= cell_ok
            r = report.ratios()
            fmt = lambda v: "n/a" if v is None else f"{v:.3g}"  # noqa: E731
            cells.append(
                f"[{bottleneck}-model p={p} {'ok' if cell_ok else 'VIOLATED'}: "
                f"provision/greedy={fmt(r['always_provision'])} escalate/greedy={fmt(r['always_escalate'])}]"
            )
    elapsed = time.perf_counter() - t0
    check(4, ok and elapsed < 30, " ".join(cells) + f" {elapsed:.1f}s")


# -- 5, 6. drift ---------------------------------------------------------------


def test_c05_swd_exactness():
    value = swd([0, 1, 2, 3], [1, 2, 3, 4])
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 3), int(rng.integers(2, 200)))
        shift = float(rng.uniform(-5, 5))
        worst = max(worst, abs(swd(x, x + shift) - abs(shift) / float(np.std(x))))
    ok = abs(value - 0.894427190999916) <= 1e-9 and worst <= 1e-12
    check(5, ok, f"swd={value:.12f}, max shift-identity error {worst:.2e}")


def test_c06_reprofile_decisions():
    ref = [0.0, 1.0, 2.0, 3.0]
    sigma = float(np.std(ref))
    state = DriftState(ref, last_profile_time=0.0)
    periodic = should_reprofile(state, 25 * HOUR, ref)
    drift = should_reprofile(state, HOUR, [v + 1.2 * sigma for v in ref])
    hold = should_reprofile(state, HOUR, [v + 0.3 * sigma for v in ref])
    ok = (
        periodic.reprofile and periodic.reason is Reason.PERIODIC
        and drift.reprofile and drift.reason is Reason.DRIFT
        and not hold.reprofile
    )
    check(6, ok, f"25h -> {periodic}, swd 1.2 -> {drift}, swd 0.3 at 1h -> {hold}")


# -- 7, 8. front and selection -------------------------------------------------


def brute_front(points):
    kept = [
        p for p in points
        if not any(
            q.quality >= p.quality and q.cost_reduction >= p.cost_reduction
            and (q.quality > p.quality or q.cost_reduction > p.cost_reduction)
            for q in points
        )
    ]
    by_coords = {}
    for p in kept:
        key = (p.quality, p.cost_reduction)
        if key not in by_coords or p.config_hash < by_coords[key].config_hash:
            by_coords[key] = p
    return sorted(by_coords.values(), key=lambda p: p.config_hash)


def test_c07_pareto_front_matches_brute_force():
    rng = np.random.default_rng(7)
    bad = 0
    for trial in range(1000):
        n = int(rng.integers(1, 201))
        qs = rng.integers(0, 21, n) / 20
        cs = rng.integers(1, 31, n).astype(float)
        pts = [point(float(q), float(c), f"{trial}-{i}") for i, (q, c) in enumerate(zip(qs, cs))]
        got = sorted(pareto_front(pts), key=lambda p: p.config_hash)
        bad += got != brute_front(pts)
    check(7, bad == 0, f"{1000 - bad}/1000 random sets match the pairwise filter")


def test_c08_choose_tradeoff_fixtures():
    front = [point(0.95, 10.0, "a"), point(0.90, 40.0, "b"), point(0.70, 60.0, "c"), point(0.50, 70.0, "d")]
    # Normalized (q, c): a (1, 0), b (0.888.., 0.5), c (0.444.., 0.833..), d (0, 1); sums 1, 1.389, 1.278, 1.
    picks = {w: choose_tradeoff(front, w).config["tag"] for w in [(1, 0), (0, 1), (1, 1)]}
    ok = picks == {(1, 0): "a", (0, 1): "d", (1, 1): "b"}
    check(8, ok, f"picks {picks}")


# -- 9. cascade analytics -------------------------------------------------------


def trunc(mean: float, std: float):
    return truncnorm((0 - mean) / std, (1 - mean) / std, loc=mean, scale=std)


def test_c09_cascade_matches_closed_form():
    t0 = time.perf_counter()
    prevalence = 0.3
    agree = (0.70, 0.90, 1.0)
    right = [(0.85, 0.08), (0.90, 0.06), (0.95, 0.03)]
    wrong = [(0.60, 0.12), (0.65, 0.10), (0.70, 0.10)]
    dc = [trunc(*d) for d in right]
    dw = [trunc(*d) for d in wrong]

    def passes(i: int, t: float) -> float:
        return agree[i] * dc[i].sf(t) + (1 - agree[i]) * dw[i].sf(t)

    t1 = brentq(lambda t: passes(0, t) - 0.6, 0.01, 0.999)
    t2 = brentq(lambda t: passes(1, t) - 0.75, 0.01, 0.999)
    a_eff = agree[0] * dc[0].sf(t1) + 0.4 * agree[1] * dc[1].sf(t2) + 0.1 * agree[2]
    f1_expected = 2 * prevalence * a_eff / (2 * prevalence * a_eff + 1 - a_eff)

    usage = TokenUsage(300, 1)
    names = ("slm-1", "slm-4", "slm-5")
    b = [blended_quarters(SPECS[m], usage) for m in names]
    base = blended_quarters(SPECS["baseline"], usage)
    factor_expected = base / (b[0] + 0.4 * b[1] + 0.1 * b[2])

    schema = LabelSchema(tuple(LabelDef.binary(f"Flag{i}") for i in range(4)))
    n = 5000
    emails = [Email(f"m{i:05d}", "s", "b") for i in range(n)]
    rng = np.random.default_rng(9)
    truth = {e.id: {lab.name: int(rng.random() < prevalence) for lab in schema} for e in emails}
    configs = {
        m: MockModelConfig(90 + i, agree[i], ConfidenceDist(*right[i]), ConfidenceDist(*wrong[i]), usage)
        for i, m in enumerate(names)
    }
    backend = MockBackend([SPECS[m] for m in (*names, "baseline")], configs, truth)
    thresholds = (t1, t2, 0.0)
    plan = LabelingPlan(
        methods={lab.name: Method.CASCADE for lab in schema},
        cascades={lab.name: CascadeConfig(lab.name, names, thresholds) for lab in schema},
    )
    preds = {lab.name: [] for lab in schema}
    method_cost = 0
    stops = np.zeros(3)
    for e in emails:
        for out in label_email(e, schema, plan, backend):
            preds[out.value.label_name].append(out.value.value)
            attempts = out.trace.attempts
            stops[len(attempts) - 1] += 1
            method_cost += sum(blended_quarters(SPECS[a.model], a.usage) for a in attempts)
    f1 = float(np.mean([label_f1(preds[lab.name], [truth[e.id][lab.name] for e in emails], lab) for lab in schema]))
    factor = base * n * len(schema) / method_cost
    fractions = stops / stops.sum()
    elapsed = time.perf_counter() - t0
    ok = (
        abs(f1 - f1_expected) <= 0.02
        and abs(factor / factor_expected - 1) <= 0.02
        and elapsed < 120
    )
    check(
        9, ok,
        f"F1 {f1:.4f} vs {f1_expected:.4f}, reduction {factor:.2f}x vs {factor_expected:.2f}x, "
        f"usage {np.round(fractions, 3).tolist()} (thresholds {t1:.3f}, {t2:.3f}), {elapsed:.1f}s",
    )


# -- 10-12. profiler -----------------------------------------------------------


HALF_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))


def test_c10_pruning_floor_and_backend_free_sweep():
    agree, right, wrong = 0.75, (0.85, 0.06), (0.55, 0.08)
    # Analytic bin agreement from the truncated normals.
    dc, dw = trunc(*right), trunc(*wrong)
    edges = [0.0, *HALF_GRID, 1.0 + 1e-9]
    analytic_floor = None
    for lo, hi in zip(edges, edges[1:]):
        pc = agree * (dc.cdf(hi) - dc.cdf(lo))
        pw = (1 - agree) * (dw.cdf(hi) - dw.cdf(lo))
        if pc + pw > 1e-6 and pc / (pc + pw) < 0.5:
            analytic_floor = hi
    world = build_world(400, 0, 0, seed=10)
    model = ModelSpec("probe", ModelKind.GENERATIVE, 30, 50, 1)
    backend = MockBackend(
        [model, SPECS["baseline"]],
        {"probe": MockModelConfig(10, agree, ConfidenceDist(*right), ConfidenceDist(*wrong))},
        world.labels,
    )
    prof = Profiler(
        backend=backend,
        schema=LabelSchema.default(),
        knobs=ProfilerKnobs([model], grid=HALF_GRID, schedule=CalibrationSchedule(400, 100, 400)),
        baseline=SPECS["baseline"],
    )
    res = prof.profile(world.stream, world.labels)
    floor = res.pruning["probe"].floor
    ok = analytic_floor == 0.70 and floor == 0.70 and res.calls["threshold_sweep"] == 0
    check(
        10, ok,
        f"floor {floor} (analytic {analytic_floor}), kept grid {res.pruning['probe'].grid}, "
        f"sweep backend calls {res.calls['threshold_sweep']}",
    )


def test_c11_search_space_reduction(profiled, world):
    _, res = profiled
    space = res.search_space
    n = len(world.stream)
    structure = (
        res.calls["rank_models"] == 5 * n * 5
        and res.calls["threshold_sweep"] == 0
        and space["evaluated_configurations"] == 5 + math.prod(len(res.pruning[m].grid) for m in res.subset)
        and len(res.sweep) == space["evaluated_configurations"] - 5
    )
    ok = structure and space["configuration_ratio"] > 100 and space["call_ratio"] > 100
    check(
        11, ok,
        f"configurations {space['exhaustive_configurations']} -> {space['evaluated_configurations']} "
        f"(ratio {space['configuration_ratio']:.0f}x), backend calls ratio {space['call_ratio']:.3g}x, "
        f"rank calls {res.calls['rank_models']}, sweep calls {res.calls['threshold_sweep']}",
    )


def test_c12_skip_rules_and_invocation_savings():
    world = build_world(3000, 0, 0, seed=12)
    schema = LabelSchema.default()
    rules = mine_skip_rules(world.labels, schema, epsilon=0.05)
    pairs = sorted((r.condition, r.consequence) for r in rules)
    expected_pairs = [(("Priority", 2), ("NeedsScheduling", 0)), (("Priority", 4), ("IsUrgent", 1))]

    exact = ModelSpec("exact", ModelKind.GENERATIVE, 30, 50, 1)
    cfg = MockModelConfig(12, 1.0, ConfidenceDist(1.0, 0.0), ConfidenceDist(1.0, 0.0))
    methods = {lab.name: Method.CASCADE for lab in schema}
    cascades = {lab.name: CascadeConfig(lab.name, ("exact",), (0.0,)) for lab in schema}

    def calls(skip: tuple[SkipRule, ...]) -> int:
        backend = MockBackend([exact, SPECS["baseline"]], {"exact": cfg}, world.labels)
        plan = LabelingPlan(dict(methods), dict(cascades), skip)
        for e in world.stream:
            label_email(e, schema, plan, backend)
        return backend.total_calls

    plain, skipping = calls(()), calls(tuple(rules))
    measured = 1 - skipping / plain
    expected = (0.25 + 0.20) / len(schema)
    ok = pairs == expected_pairs and abs(measured - expected) <= 0.02
    check(
        12, ok,
        f"rules {[f'{c[0]}={c[1]} => {q[0]}={q[1]}' for c, q in pairs]}, "
        f"invocations {plain} -> {skipping} (reduction {measured:.4f} vs {expected:.4f})",
    )


# -- 13. classifier ------------------------------------------------------------


def test_c13_classifier_training():
    rng = np.random.default_rng(13)
    model = init_model(6, ["a", "b"], hidden=(8, 8), seed=1, dtype=np.float64)
    X = rng.normal(size=(32, 6))
    Y = (rng.random((32, 2)) < 0.5).astype(float)
    grad_err = gradient_check(model, (X, Y))

    cfg = TrainingConfig(weight_decay=0.0)
    theta0, lr = 1.7, 1e-3
    p = np.array([theta0])
    g = 2 * p.copy()
    adam_step([p], [g], AdamState.zeros_like([p]), lr, cfg)
    m, v = (1 - cfg.beta1) * g[0], (1 - cfg.beta2) * g[0] ** 2
    expected = theta0 - lr * (m / (1 - cfg.beta1)) / (math.sqrt(v / (1 - cfg.beta2)) + cfg.eps)
    adam_err = abs(p[0] - expected)

    def blobs(n: int, seed: int):
        r = np.random.default_rng(seed)
        Xb = np.vstack([r.normal(-3, 1, (n, 2)), r.normal(3, 1, (n, 2))])
        return Xb, np.concatenate([np.zeros(n), np.ones(n)])[:, None]

    t0 = time.perf_counter()
    trained = train(*blobs(500, 0), TrainingConfig(epochs=10, hidden=(32, 16), max_lr=5e-3), ["side"])
    train_s = time.perf_counter() - t0
    Xt, Yt = blobs(500, 1)
    accuracy = float(np.mean(predict_values(trained, Xt)[:, 0] == Yt[:, 0]))

    full = init_model(384, ["NeedsReply", "IsUrgent", "NeedsAction", "NeedsScheduling"])
    x = rng.normal(size=384)
    times = []
    for _ in range(300):
        t = time.perf_counter()
        predict(full, x)
        times.append(time.perf_counter() - t)
    latency_ms = float(np.median(times)) * 1000

    ok = grad_err < 1e-4 and adam_err < 1e-12 and accuracy >= 0.99 and train_s < 30 and latency_ms < 1
    check(
        13, ok,
        f"gradient rel err {grad_err:.2e}, Adam err {adam_err:.1e}, blob accuracy {accuracy:.4f} "
        f"in {train_s:.2f}s, median latency {latency_ms:.3f} ms",
    )


# -- 14. oracle dominance -------------------------------------------------------


def test_c14_oracle_dominates_swept_configs():
    schema = LabelSchema.default()
    subset = ["slm-1", "slm-3", "slm-5"]
    grid = (0.6, 0.75, 0.9)
    comparisons, violations = 0, 0
    for seed in range(6):
        world = small_world(seed, n_stream=200, n_validation=0, n_eval=0)
        backend = default_backend(world.labels, seed)
        table = SoloTable.build(SoloStore(backend), world.stream, subset, schema)
        refs = reference_arrays(world.labels, table.email_ids, schema)
        inp = EvalInputs(schema, table, refs, 1, np.zeros(len(world.stream), dtype=np.int64))
        sweep = sweep_thresholds(subset, [grid] * 3, inp)
        assert len(sweep) == 27
        for lab in schema:
            outs = [table.value[m, lab.name].tolist() for m in subset]
            oracle = oracle_cascade_f1(outs, refs[lab.name].tolist(), lab)
            for pt in sweep:
                comparisons += 1
                violations += pt.per_label_f1[lab.name] > oracle
    check(14, violations == 0, f"{comparisons - violations}/{comparisons} label-config comparisons over 6 worlds")


# -- 15, 16. determinism and metrics -----------------------------------------


def test_c15_end_to_end_determinism(tmp_path):
    run_pipeline(tmp_path / "a", seed=15)
    run_pipeline(tmp_path / "b", seed=15)
    differing = [rel for rel in REPORTS if (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()]
    check(15, not differing, f"{len(REPORTS) - len(differing)}/{len(REPORTS)} reports byte-identical")


def test_c16_metric_fixtures():
    binary = f1_binary([1, 1, 0, 0], [1, 0, 1, 0])
    macro = f1_macro([1, 2, 2], [1, 2, 3], [1, 2, 3])
    ok = binary == 0.5 and macro == float(Fraction(5, 9))
    check(16, ok, f"binary {binary}, macro {macro!r}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
