"""Collects one pass/fail line per acceptance criterion and prints them at the end."""
import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.outcome != "passed" if report.when == "call" else report.failed
    if report.when == "call" or failed:
        details = [v for k, v in item.user_properties if k == "detail"]
        prev = _RESULTS.get(number)
        ok = not failed and (prev is None or prev[1])
        _RESULTS[number] = (title, ok, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
