"""Shared pytest wiring: one pass/fail summary line per acceptance criterion.

Tests carry ``@pytest.mark.criterion(number, title)``; a criterion passes
only when every test attached to it passes.
"""

import pytest

_outcomes: dict[int, dict] = {}


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        number, title = marker.args
        item.user_properties.append(("criterion", (number, title)))


def pytest_runtest_logreport(report):
    tag = dict(report.user_properties).get("criterion")
    if tag is None:
        return
    number, title = tag
    entry = _outcomes.setdefault(number, {"title": title, "tests": {}})
    previous = entry["tests"].get(report.nodeid, "passed")
    if report.failed:
        entry["tests"][report.nodeid] = "failed"
    elif report.skipped:
        entry["tests"][report.nodeid] = "skipped" if previous == "passed" else previous
    elif report.when == "call":
        entry["tests"].setdefault(report.nodeid, "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        results = list(entry["tests"].values())
        failed = results.count("failed")
        if failed:
            verdict = "FAIL"
        elif results and all(r == "passed" for r in results):
            verdict = "PASS"
        else:
            verdict = "SKIP"
        passed = results.count("passed")
        terminalreporter.write_line(
            f"criterion {number:2d}: {verdict}  {entry['title']}  ({passed}/{len(results)} checks passed)"
        )
