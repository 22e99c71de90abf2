"""Shared pytest wiring: the acceptance-criteria summary block."""

import pytest

# nodeid -> (criterion number, short description)
_CRITERIA = {}
# criterion number -> (description, outcome string)
_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(n, description): one numbered acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    entry = _CRITERIA.get(report.nodeid)
    if entry is None:
        return
    n, desc = entry
    if report.when == "call":
        outcome = "PASS" if report.passed else (
            "SKIP" if report.skipped else "FAIL")
        _RESULTS[n] = (desc, outcome)
    elif report.when == "setup" and report.failed:
        _RESULTS[n] = (desc, "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        desc, outcome = _RESULTS[n]
        tr.write_line(f"criterion {n} [{outcome}] {desc}")
