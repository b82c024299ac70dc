import pytest

# criterion number -> list of (passed, detail), one entry per test
_RESULTS: dict[int, list[tuple[bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(item.user_properties).get("detail", "")
        if report.failed and not detail and call.excinfo is not None:
            detail = (str(call.excinfo.value).splitlines() or [call.excinfo.typename])[0]
        _RESULTS.setdefault(marker.args[0], []).append((report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        entries = _RESULTS[n]
        status = "PASS" if all(ok for ok, _ in entries) else "FAIL"
        detail = "; ".join(d for _, d in entries if d)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
