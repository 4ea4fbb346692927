import pytest

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(item.user_properties).get("detail", "")
        if report.failed:
            detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "failed"
        _CRITERIA.append((marker.args[0], report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail.splitlines()[0]}]"
        terminalreporter.write_line(line)
