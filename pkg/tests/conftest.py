"""Shared pytest hooks: acceptance-criterion bookkeeping.

Tests marked ``@pytest.mark.criterion(n, "title")`` report one PASS/FAIL line
each at the end of the session.  The verdict is the test outcome itself; a
test may attach a one-line measurement with ``record_property("detail", ...)``.
"""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    failed_now = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed_now:
        previous = _RESULTS.get(n)
        if previous is None or previous[0] == "PASS":
            if report.failed and not detail:
                detail = str(report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else report.longrepr).splitlines()[0]
            _RESULTS[n] = ("FAIL" if report.failed else ("SKIP" if report.skipped else "PASS"), title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        verdict, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"{verdict} criterion {n}: {title}" + (f" -- {detail}" if detail else ""))
