"""Collects acceptance verdicts so they print in the terminal summary."""

import pytest

RESULTS = []


@pytest.fixture
def verdict():
    """``verdict(name, passed, detail)`` records, prints and asserts one criterion."""

    def record(name, passed, detail=""):
        line = f"ACCEPTANCE {'PASS' if passed else 'FAIL'} {name}: {detail}"
        RESULTS.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
