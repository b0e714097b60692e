import pytest

from spotkit.vocab import default_vocabulary


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()



_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    # one verdict per acceptance criterion, keyed by the test's ``criterion`` marker
    if "test_acceptance.py" not in report.nodeid:
        return
    name = dict(report.user_properties).get("criterion")
    if name is None:
        return
    if report.when == "call" or report.outcome == "failed":
        prev = _ACCEPTANCE.get(name, True)
        _ACCEPTANCE[name] = prev and report.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
