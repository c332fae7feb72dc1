from __future__ import annotations

import pytest

from helpers import ACCEPTANCE_LINES, default_backend, default_profiler, small_world


@pytest.fixture(scope="session")
def world():
    return small_world(seed=0)


@pytest.fixture(scope="session")
def profiled(world):
    """One profiling pass on 200 calibration emails of the default mock world."""
    backend = default_backend(world.labels)
    prof = default_profiler(backend)
    result = prof.profile(world.stream, world.labels)
    return prof, result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
