"""Capacity-constrained provisioning across cascade models.

The allocator is the greedy marginal-cost rule: serve a request on the first
model (from its entry point upward) with free capacity; when a model is full,
compare the penalised price of one more instance there, ``c_i * p**n_i``,
against the extra running cost of moving one model up, ``z_{i+1} - z_i``.
The top model always provisions when full.

All money is exact: integer micro-units for ``c`` and ``z`` and
:class:`fractions.Fraction` for the penalty and derived quantities.

Model indices are 0-based in code and 1-based in anything printed.
"""

from __future__ import annotations

import csv
import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import MailCascadeError

Number = int | Fraction


class TraceError(MailCascadeError):
    pass


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class ProvisionCostModel:
    c: tuple[int, ...]
    z: tuple[int, ...]
    p: Fraction
    capacity: tuple[Fraction, ...]
    d_req: Fraction = Fraction(1)

    def __init__(self, c, z, p, capacity, d_req=1):
        c = tuple(c)
        z = tuple(z)
        if isinstance(capacity, (int, float, Fraction)):
            capacity = (capacity,) * len(c)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "p", _frac(p))
        object.__setattr__(self, "capacity", tuple(_frac(x) for x in capacity))
        object.__setattr__(self, "d_req", _frac(d_req))
        if not (len(c) == len(z) == len(self.capacity)) or not c:
            raise ValueError("c, z and capacity must have one entry per model")
        if any(a >= b for a, b in zip(z, z[1:])):
            raise ValueError("running costs z must be strictly increasing")
        if self.p < 1:
            raise ValueError("penalty p must be >= 1")
        if any(x <= 0 for x in self.capacity) or self.d_req <= 0:
            raise ValueError("capacity and per-request demand must be positive")

    @property
    def m(self) -> int:
        return len(self.c)

    def instance_price(self, i: int, n_i: int) -> Fraction:
        """Price of adding one more instance to model ``i`` that already has ``n_i``."""
        return self.c[i] * self.p**n_i


@dataclass
class ProvisioningState:
    n: list[int]
    k: list[int]
    active: list[int] | None = None

    def __post_init__(self) -> None:
        self.n = list(self.n)
        self.k = list(self.k)
        if len(self.n) != len(self.k):
            raise ValueError("n and k differ in length")
        if any(x < 1 for x in self.n) or any(x < 0 for x in self.k):
            raise ValueError("instance counts must be >= 1 and request counts >= 0")
        # In-flight requests; equals k when nothing ever completes.
        self.active = list(self.k) if self.active is None else list(self.active)

    def copy(self) -> ProvisioningState:
        return ProvisioningState(list(self.n), list(self.k), list(self.active))

    def has_room(self, i: int, cm: ProvisionCostModel) -> bool:
        return self.active[i] * cm.d_req < self.n[i] * cm.capacity[i]


class Strategy(enum.Enum):
    GREEDY = "greedy"
    ALWAYS_PROVISION = "always_provision"
    ALWAYS_ESCALATE = "always_escalate"


@dataclass(frozen=True)
class Allocation:
    model: int
    provisioned: bool
    marginal_cost: Fraction

    def __str__(self) -> str:
        kind = "ProvisionedAndServedOn" if self.provisioned else "ServedOn"
        return f"{kind}({self.model + 1})"


def allocate_request(
    state: ProvisioningState,
    cm: ProvisionCostModel,
    start: int = 0,
    strategy: Strategy = Strategy.GREEDY,
) -> Allocation:
    """Admit one request, mutating ``state``; returns where it went and what it added to the total."""
    for i in range(start, cm.m):
        if state.has_room(i, cm):
            return _serve(state, cm, i, provision=False)
        if i == cm.m - 1 or strategy is Strategy.ALWAYS_PROVISION:
            return _serve(state, cm, i, provision=True)
        if strategy is Strategy.GREEDY and cm.instance_price(i, state.n[i]) < cm.z[i + 1] - cm.z[i]:
            return _serve(state, cm, i, provision=True)
    raise AssertionError("unreachable: the top model always admits")


def _serve(state: ProvisioningState, cm: ProvisionCostModel, i: int, provision: bool) -> Allocation:
    cost = Fraction(cm.z[i])
    if provision:
        cost += cm.instance_price(i, state.n[i])
        state.n[i] += 1
    state.k[i] += 1
    state.active[i] += 1
    return Allocation(i, provision, cost)


@dataclass(frozen=True)
class CostBreakdown:
    instance_cost: Fraction
    run_cost: Fraction
    total: Fraction


def total_cost(state: ProvisioningState, cm: ProvisionCostModel) -> CostBreakdown:
    """Geometric instance cost plus per-request running cost."""
    inst = Fraction(0)
    for c_i, n_i in zip(cm.c, state.n):
        if cm.p == 1:
            inst += c_i * n_i
        else:
            inst += c_i * (cm.p**n_i - 1) / (cm.p - 1)
    run = Fraction(sum(k_i * z_i for k_i, z_i in zip(state.k, cm.z)))
    return CostBreakdown(inst, run, inst + run)


def brute_force_min_cost(
    initial: ProvisioningState,
    cm: ProvisionCostModel,
    n_requests: int,
    start: int = 0,
) -> Fraction:
    """Minimum final total over every per-request decision sequence.

    Each request may go to any model at or above ``start``; a full model gets
    one more instance. Sequences reaching the same (n, k) are merged, which
    keeps the enumeration exact while bounding it by the number of states.
    """

    @lru_cache(maxsize=None)
    def best(n: tuple[int, ...], k: tuple[int, ...], remaining: int) -> Fraction:
        if remaining == 0:
            return total_cost(ProvisioningState(n, k), cm).total
        out = None
        for j in range(start, cm.m):
            s = ProvisioningState(n, k)
            _serve(s, cm, j, provision=not s.has_room(j, cm))
            v = best(tuple(s.n), tuple(s.k), remaining - 1)
            out = v if out is None or v < out else out
        return out

    if initial.active != initial.k:
        raise ValueError("brute force assumes no completed requests")
    return best(tuple(initial.n), tuple(initial.k), n_requests)


def run_requests(
    initial: ProvisioningState,
    cm: ProvisionCostModel,
    n_requests: int,
    strategy: Strategy = Strategy.GREEDY,
) -> ProvisioningState:
    state = initial.copy()
    for _ in range(n_requests):
        allocate_request(state, cm, strategy=strategy)
    return state


# -- org policies -------------------------------------------------------------


@dataclass(frozen=True)
class QualityDowngrade:
    target: int  # 0-based model index

    def to_dict(self) -> dict:
        return {"kind": "quality_downgrade", "target": self.target + 1}


@dataclass(frozen=True)
class DelayStagger:
    kappa: float

    def __post_init__(self) -> None:
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    def to_dict(self) -> dict:
        return {"kind": "delay_stagger", "kappa": self.kappa}


@dataclass(frozen=True)
class OrgPolicy:
    group: str
    kind: QualityDowngrade | DelayStagger


def load_policies(path: str | Path) -> dict[str, OrgPolicy]:
    """JSON list of ``{"group", "kind", "target" | "kappa"}``; targets are 1-based."""
    out = {}
    for item in json.loads(Path(path).read_text()):
        if item["kind"] == "quality_downgrade":
            kind = QualityDowngrade(int(item["target"]) - 1)
        elif item["kind"] == "delay_stagger":
            kind = DelayStagger(float(item["kappa"]))
        else:
            raise ValueError(f"unknown policy kind {item['kind']!r}")
        out[item["group"]] = OrgPolicy(item["group"], kind)
    return out


@dataclass(frozen=True)
class PolicyOutcome:
    entry: int
    defer_ms: float = 0.0
    bypass: bool = False
    applied: str = ""


def apply_policy(
    group: str,
    entry: int,
    state: ProvisioningState,
    cm: ProvisionCostModel,
    policies: Mapping[str, OrgPolicy],
    now_ms: float = 0.0,
    full_since: Mapping[int, float] | None = None,
    already_deferred: bool = False,
) -> PolicyOutcome:
    """Rewrite or defer a request when its entry model is at capacity; unknown groups pass through."""
    policy = policies.get(group)
    if policy is None or state.has_room(entry, cm):
        return PolicyOutcome(entry)
    kind = policy.kind
    if isinstance(kind, QualityDowngrade):
        if kind.target < entry:
            return PolicyOutcome(kind.target, bypass=True, applied="quality_downgrade")
        return PolicyOutcome(entry)
    if already_deferred:
        return PolicyOutcome(entry)
    since = (full_since or {}).get(entry, now_ms)
    delay = kind.kappa * (now_ms - since)
    if delay > 0:
        return PolicyOutcome(entry, defer_ms=delay, applied="delay_stagger")
    return PolicyOutcome(entry)


# -- load simulation ----------------------------------------------------------


@dataclass(frozen=True)
class Arrival:
    time_ms: float
    email_id: str
    group: str = ""
    entry: int | None = 0  # None: embedding-classifier traffic, outside provisioning


@dataclass(frozen=True)
class LedgerRow:
    time_ms: float
    email_id: str
    group: str
    action: str
    model: int | None
    marginal_cost: Fraction
    cumulative: Fraction
    n: tuple[int, ...]
    k: tuple[int, ...]


@dataclass
class SimulationRun:
    strategy: Strategy
    ledger: list[LedgerRow]
    final_state: ProvisioningState
    initial_total: Fraction
    final_total: Fraction

    @property
    def increase(self) -> Fraction:
        return self.final_total - self.initial_total


def read_trace(path: str | Path) -> list[Arrival]:
    """CSV with columns timestamp_ms, email_id, user_group; timestamps must not decrease."""
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"timestamp_ms", "email_id", "user_group"}
        if not need.issubset(reader.fieldnames or []):
            raise TraceError(f"trace needs columns {sorted(need)}")
        last = -math.inf
        for lineno, row in enumerate(reader, 2):
            try:
                t = float(row["timestamp_ms"])
            except (TypeError, ValueError):
                raise TraceError(f"line {lineno}: bad timestamp {row['timestamp_ms']!r}") from None
            if not math.isfinite(t) or t < last:
                raise TraceError(f"line {lineno}: timestamps must be finite and non-decreasing")
            last = t
            out.append(Arrival(t, row["email_id"], row["user_group"] or ""))
    return out


def write_trace(path: str | Path, arrivals: Iterable[Arrival]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_ms", "email_id", "user_group"])
        for a in arrivals:
            w.writerow([repr(float(a.time_ms)), a.email_id, a.group])


def peak_trace(
    duration_s: float,
    base_rate: float,
    peak_rate: float,
    peak_window: tuple[float, float],
    seed: int = 0,
    groups: Sequence[str] = ("default",),
    id_prefix: str = "r",
) -> list[Arrival]:
    """Poisson arrivals at ``base_rate``/s with a ``peak_rate``/s window (seconds)."""
    rng = np.random.default_rng(seed)
    t = 0.0
    out = []
    i = 0
    while True:
        rate = peak_rate if peak_window[0] <= t < peak_window[1] else base_rate
        t += rng.exponential(1.0 / rate)
        if t >= duration_s:
            break
        group = groups[int(rng.integers(len(groups)))]
        out.append(Arrival(round(t * 1000.0, 3), f"{id_prefix}{i:06d}", group))
        i += 1
    return out


def assign_entries(arrivals: Sequence[Arrival], usage_fractions: Sequence[float]) -> list[Arrival]:
    """Give each request the cascade model it needs, drawn from profiled usage fractions by email id."""
    from .backends import hash_uniforms

    cum = np.cumsum(np.asarray(usage_fractions, dtype=float))
    cum /= cum[-1]
    out = []
    for a in arrivals:
        u = hash_uniforms("entry", a.email_id, n=1)[0]
        out.append(Arrival(a.time_ms, a.email_id, a.group, int(np.searchsorted(cum, u, side="right"))))
    return out


def initial_instances(
    usage_fractions: Sequence[float],
    rate_per_s: float,
    service_ms: float,
    capacity: Sequence[float],
    d_req: float = 1.0,
) -> list[int]:
    """Instances per model sized to the steady-state in-flight load implied by the usage fractions."""
    return [
        max(1, math.ceil(f * rate_per_s * service_ms / 1000.0 * d_req / cap - 1e-9))
        for f, cap in zip(usage_fractions, capacity)
    ]


_COMPLETE, _ARRIVE = 0, 1


def simulate_strategy(
    arrivals: Sequence[Arrival],
    initial: ProvisioningState,
    cm: ProvisionCostModel,
    strategy: Strategy = Strategy.GREEDY,
    policies: Mapping[str, OrgPolicy] | None = None,
    service_ms: float | None = 1000.0,
) -> SimulationRun:
    """Deterministic discrete-event replay ordered by (time, completions first, sequence number).

    Served requests hold one slot for ``service_ms``; ``None`` means they never
    complete. Instances are never released.
    """
    policies = policies or {}
    state = initial.copy()
    start_total = total_cost(state, cm).total
    cumulative = start_total
    ledger = [LedgerRow(0.0, "", "", "init", None, Fraction(0), cumulative, tuple(state.n), tuple(state.k))]
    full_since: dict[int, float] = {}
    events: list = []
    seq = 0
    for a in arrivals:
        heapq.heappush(events, (a.time_ms, _ARRIVE, seq, a, False))
        seq += 1

    def refresh(i: int, now: float) -> None:
        if state.has_room(i, cm):
            full_since.pop(i, None)
        else:
            full_since.setdefault(i, now)

    while events:
        now, kind, _, payload, deferred = heapq.heappop(events)
        if kind == _COMPLETE:
            state.active[payload] -= 1
            refresh(payload, now)
            continue
        a: Arrival = payload
        if a.entry is None:
            ledger.append(
                LedgerRow(now, a.email_id, a.group, "classifier", None, Fraction(0), cumulative,
                          tuple(state.n), tuple(state.k))
            )
            continue
        outcome = apply_policy(a.group, a.entry, state, cm, policies, now, full_since, deferred)
        if outcome.defer_ms > 0:
            heapq.heappush(events, (now + outcome.defer_ms, _ARRIVE, seq, a, True))
            seq += 1
            ledger.append(
                LedgerRow(now, a.email_id, a.group, "deferred", a.entry, Fraction(0), cumulative,
                          tuple(state.n), tuple(state.k))
            )
            continue
        if outcome.bypass:
            alloc = _serve(state, cm, outcome.entry, provision=not state.has_room(outcome.entry, cm))
        else:
            alloc = allocate_request(state, cm, start=outcome.entry, strategy=strategy)
        cumulative += alloc.marginal_cost
        action = "provisioned" if alloc.provisioned else "served"
        if outcome.applied:
            action += f"+{outcome.applied}"
        ledger.append(
            LedgerRow(now, a.email_id, a.group, action, alloc.model, alloc.marginal_cost, cumulative,
                      tuple(state.n), tuple(state.k))
        )
        for i in range(cm.m):
            refresh(i, now)
        if service_ms is not None:
            heapq.heappush(events, (now + service_ms, _COMPLETE, seq, alloc.model, False))
            seq += 1
    return SimulationRun(strategy, ledger, state, start_total, cumulative)


@dataclass
class LoadReport:
    runs: dict[Strategy, SimulationRun] = field(default_factory=dict)

    @property
    def greedy(self) -> SimulationRun:
        return self.runs[Strategy.GREEDY]

    def ratios(self) -> dict[str, float | None]:
        """Baseline cost increase over greedy cost increase."""
        g = self.greedy.increase
        out = {}
        for s in (Strategy.ALWAYS_PROVISION, Strategy.ALWAYS_ESCALATE):
            inc = self.runs[s].increase
            out[s.value] = None if g == 0 else float(inc / g)
        return out

    def summary(self) -> dict:
        return {
            "strategies": {
                s.value: {
                    "initial_total": float(r.initial_total),
                    "final_total": float(r.final_total),
                    "cost_increase": float(r.increase),
                    "instances": r.final_state.n,
                    "served": r.final_state.k,
                }
                for s, r in self.runs.items()
            },
            "baseline_over_greedy_increase": self.ratios(),
        }


def simulate_load(
    arrivals: Sequence[Arrival],
    initial: ProvisioningState,
    cm: ProvisionCostModel,
    policies: Mapping[str, OrgPolicy] | None = None,
    service_ms: float | None = 1000.0,
) -> LoadReport:
    """Replay the trace under the greedy allocator and both baselines."""
    report = LoadReport()
    for s in Strategy:
        report.runs[s] = simulate_strategy(arrivals, initial, cm, s, policies, service_ms)
    return report


def write_ledger(path: str | Path, ledger: Sequence[LedgerRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", "email_id", "user_group", "action", "model", "marginal_cost", "cumulative_total"])
        for r in ledger:
            w.writerow([
                repr(float(r.time_ms)), r.email_id, r.group, r.action,
                "" if r.model is None else r.model + 1,
                repr(float(r.marginal_cost)), repr(float(r.cumulative)),
            ])
