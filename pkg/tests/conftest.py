import os

import numpy as np
import pytest

# Keep BLAS single-threaded so timings and float results are reproducible.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config._criteria = CRITERIA


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion's outcome and measurements."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    entry = CRITERIA.setdefault(number, {"title": title, "details": [], "outcome": None})

    def note(text: str) -> None:
        entry["details"].append(text)
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = CRITERIA.setdefault(number, {"title": title, "details": [], "outcome": None})
    if report.when == "call" or (report.when == "setup" and report.failed):
        if report.passed:
            entry["outcome"] = entry["outcome"] or "PASS"
        else:
            entry["outcome"] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        entry = CRITERIA[number]
        status = entry["outcome"] or "NOT RUN"
        terminalreporter.write_line(f"criterion {number:2d} {status:7s} {entry['title']}")
        for d in entry["details"]:
            terminalreporter.write_line(f"    {d}")

