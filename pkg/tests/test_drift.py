from __future__ import annotations

import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from mailcascade.drift import (
    DegenerateReference,
    DriftMonitor,
    DriftState,
    Reason,
    RecentWindow,
    should_reprofile,
    swd,
    wasserstein1,
)

HOUR = 3600.0
floats = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def test_swd_worked_example():
    assert swd([0, 1, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.8944271909999159, abs=1e-9)
    assert swd([0, 1, 2, 3], [1, 2, 3, 4]) == pytest.approx(1 / math.sqrt(1.25), abs=1e-12)


def test_swd_identical_and_degenerate():
    assert swd([0.2, 0.5, 0.9], [0.9, 0.2, 0.5]) == 0.0
    with pytest.raises(DegenerateReference):
        swd([5, 5, 5], [1, 2])


@given(st.lists(floats, min_size=1, max_size=30), st.lists(floats, min_size=1, max_size=30))
def test_wasserstein_matches_scipy(x, y):
    assert wasserstein1(x, y) == pytest.approx(wasserstein_distance(x, y), rel=1e-9, abs=1e-9)


def test_location_shift_identity_on_random_samples():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(2, 200)))
        c = float(rng.normal(scale=3))
        assert swd(x, x + c) == pytest.approx(abs(c) / np.std(x), rel=1e-12, abs=1e-12)


@given(st.lists(floats, min_size=2, max_size=30), st.lists(floats, min_size=1, max_size=30), st.floats(0.01, 100))
def test_swd_invariant_under_common_scaling(x, y, a):
    if np.std(x) < 1e-6:
        return
    assert swd([a * v for v in x], [a * v for v in y]) == pytest.approx(swd(x, y), rel=1e-9, abs=1e-9)


@given(st.lists(floats, min_size=2, max_size=20), st.lists(floats, min_size=2, max_size=20))
def test_swd_zero_iff_same_distribution(x, y):
    if np.std(x) < 1e-6:
        return
    value = swd(x, y)
    assert value >= 0
    if len(x) == len(y):
        assert (value == 0) == (sorted(x) == sorted(y))


def test_decision_examples():
    ref = [0.0, 1.0, 2.0, 3.0]
    sigma = float(np.std(ref))
    state = DriftState(ref, last_profile_time=0.0)
    periodic = should_reprofile(state, 25 * HOUR, ref)
    assert periodic.reprofile and periodic.reason is Reason.PERIODIC
    drift = should_reprofile(state, HOUR, [v + 1.2 * sigma for v in ref])
    assert drift.reprofile and drift.reason is Reason.DRIFT
    assert drift.swd == pytest.approx(1.2, abs=1e-12)
    hold = should_reprofile(state, HOUR, [v + 0.3 * sigma for v in ref])
    assert not hold.reprofile and hold.swd == pytest.approx(0.3, abs=1e-12)
    assert str(periodic) == "Reprofile(periodic)" and str(hold) == "Hold"


def test_state_round_trip(tmp_path):
    state = DriftState([0.1, 0.5, 0.7], 12.5, 100.0, 0.8)
    state.save(tmp_path / "s.json")
    assert DriftState.load(tmp_path / "s.json") == state


def test_window_keeps_latest_values_under_concurrency():
    window = RecentWindow(size=1000)

    def push(base: int) -> None:
        for i in range(500):
            window.append(base + i)

    threads = [threading.Thread(target=push, args=(k * 1000,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(window) == 1000


def test_monitor_allows_one_reprofile_in_flight():
    monitor = DriftMonitor(DriftState([0.0, 1.0], 0.0, period=10.0))
    monitor.observe(0.5)
    assert monitor.check(20.0).reprofile
    assert not monitor.check(30.0).reprofile
    monitor.complete([0.0, 1.0], 30.0)
    assert not monitor.check(31.0).reprofile
