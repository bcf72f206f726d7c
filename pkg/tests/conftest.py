"""Acceptance bookkeeping: runtime budgets and one PASS/FAIL line per criterion."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, budget_s): acceptance criterion with a runtime budget")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title, budget = marker.args
    if report.passed and report.duration > budget:
        report.outcome = "failed"
        report.longrepr = f"runtime {report.duration:.1f}s exceeds the {budget}s budget"
    detail = dict(item.user_properties).get("detail", "")
    _RESULTS[number] = (title, report.passed, report.duration, budget, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, duration, budget, detail = _RESULTS[number]
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} {status}  {title}  ({duration:.1f}s / {budget}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
