"""Collects the outcome of every acceptance criterion for a one-line-each summary."""

import pytest

_OUTCOMES = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or report.failed:
        previous = _OUTCOMES.get(label, "PASS")
        _OUTCOMES[label] = "FAIL" if report.failed or previous == "FAIL" else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in _OUTCOMES.items():
        terminalreporter.write_line(f"{status}  {label}")
