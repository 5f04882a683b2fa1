"""Shared fixtures and the acceptance-criterion summary."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n = int(marker.args[0])
    state = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    prev = _CRITERIA.get(n)
    # a criterion spread over several tests fails if any part fails
    if prev is not None and prev[1] == "FAIL":
        state = "FAIL"
    elapsed = report.duration + (prev[2] if prev else 0.0)
    _CRITERIA[n] = (item.name if prev is None else prev[0], state, elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, state, elapsed = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {state}  ({elapsed:.1f} s)  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
