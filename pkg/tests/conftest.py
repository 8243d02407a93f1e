"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_outcomes: dict = {}
_titles: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    _titles[n] = title
    if call.when == "call" or call.excinfo is not None:
        failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
        prev = _outcomes.get(n, True)
        _outcomes[n] = prev and not failed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        tag = "PASS" if _outcomes[n] else "FAIL"
        tr.write_line(f"criterion {n:2d}: {tag}  {_titles[n]}")
