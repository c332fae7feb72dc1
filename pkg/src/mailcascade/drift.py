"""Confidence-distribution drift detection and the re-profiling decision."""

from __future__ import annotations

import enum
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import MailCascadeError

DAY_SECONDS = 24 * 3600.0
DEFAULT_WINDOW = 1000


class DegenerateReference(MailCascadeError):
    pass


def wasserstein1(x: Sequence[float], y: Sequence[float]) -> float:
    """Exact W1 between two empirical distributions via their quantile functions.

    The quantile functions are step functions with breaks at i/n and j/m; on the
    common grid (denominator n*m) both are constant on every cell.
    """
    xs = np.sort(np.asarray(x, dtype=np.float64))
    ys = np.sort(np.asarray(y, dtype=np.float64))
    n, m = len(xs), len(ys)
    if n == 0 or m == 0:
        raise ValueError("both samples must be nonempty")
    if n == m:
        return float(np.mean(np.abs(xs - ys)))
    ends = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    starts = np.concatenate(([0], ends[:-1]))
    widths = ends - starts
    return float(np.sum(np.abs(xs[starts // m] - ys[starts // n]) * widths) / (n * m))


def swd(x: Sequence[float], y: Sequence[float]) -> float:
    """W1(x, y) divided by the population standard deviation of the reference ``x``."""
    if len(x) < 2:
        raise ValueError("reference sample needs at least two values")
    if len(y) < 1:
        raise ValueError("recent sample must be nonempty")
    sigma = float(np.std(np.asarray(x, dtype=np.float64)))
    if sigma == 0:
        raise DegenerateReference("reference sample has zero spread")
    return wasserstein1(x, y) / sigma


class Reason(enum.Enum):
    PERIODIC = "periodic"
    DRIFT = "drift"


@dataclass(frozen=True)
class Decision:
    reprofile: bool
    reason: Reason | None = None
    swd: float | None = None

    def __str__(self) -> str:
        if not self.reprofile:
            return "Hold"
        return f"Reprofile({self.reason.value})"


HOLD = Decision(False)


@dataclass
class DriftState:
    reference_sample: list[float]
    last_profile_time: float
    period: float = DAY_SECONDS
    swd_threshold: float = 1.0

    def __post_init__(self) -> None:
        if len(self.reference_sample) < 2:
            raise ValueError("reference sample needs at least two values")

    def to_dict(self) -> dict:
        return {
            "reference_sample": list(self.reference_sample),
            "last_profile_time": self.last_profile_time,
            "period": self.period,
            "swd_threshold": self.swd_threshold,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DriftState:
        d = json.loads(Path(path).read_text())
        return cls(
            [float(v) for v in d["reference_sample"]],
            float(d["last_profile_time"]),
            float(d.get("period", DAY_SECONDS)),
            float(d.get("swd_threshold", 1.0)),
        )


def should_reprofile(state: DriftState, now: float, recent: Sequence[float]) -> Decision:
    """Periodic trigger first, then SWD above threshold, else hold. Times are seconds."""
    if len(recent) == 0:
        raise ValueError("recent sample must be nonempty")
    if now - state.last_profile_time >= state.period:
        return Decision(True, Reason.PERIODIC)
    value = swd(state.reference_sample, recent)
    if value > state.swd_threshold:
        return Decision(True, Reason.DRIFT, value)
    return Decision(False, None, value)


class RecentWindow:
    """Ring buffer of the most recent confidences; appends may come from many threads."""

    def __init__(self, size: int = DEFAULT_WINDOW, values: Iterable[float] = ()):
        self._buf: deque[float] = deque(values, maxlen=size)
        self._lock = threading.Lock()

    def append(self, value: float) -> None:
        with self._lock:
            self._buf.append(value)

    def extend(self, values: Iterable[float]) -> None:
        with self._lock:
            self._buf.extend(values)

    def snapshot(self) -> list[float]:
        with self._lock:
            return list(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


@dataclass
class DriftMonitor:
    """Checks lazily at labeling time; at most one re-profile is in flight."""

    state: DriftState
    window: RecentWindow = field(default_factory=RecentWindow)
    in_flight: bool = False

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def observe(self, confidence: float) -> None:
        self.window.append(confidence)

    def check(self, now: float) -> Decision:
        recent = self.window.snapshot()
        with self._lock:
            if self.in_flight or not recent:
                return HOLD
            decision = should_reprofile(self.state, now, recent)
            if decision.reprofile:
                self.in_flight = True
            return decision

    def complete(self, reference_sample: Sequence[float], now: float) -> None:
        with self._lock:
            self.state = DriftState(list(reference_sample), now, self.state.period, self.state.swd_threshold)
            self.in_flight = False
