import pytest

_verdicts: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _verdicts[n] = ("PASS" if rep.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        verdict, title = _verdicts[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
