"""Collects the outcome of every ``criterion``-marked test and prints one line per criterion."""

import time

import pytest

_OUTCOMES: dict[int, tuple[str, str]] = {}
_DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        passed = call.excinfo is None
        prev = _OUTCOMES.get(n)
        ok = passed and (prev is None or prev[0] == "PASS")
        _OUTCOMES[n] = ("PASS" if ok else "FAIL", title)
        _DETAILS.setdefault(n, []).extend(str(v) for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status, title = _OUTCOMES[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
        for line in _DETAILS.get(n, []):
            terminalreporter.write_line(f"               {line}")


@pytest.fixture
def timer():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
