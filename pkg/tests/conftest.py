"""Shared fixtures: acceptance verdict lines are echoed in the terminal summary."""
import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print a PASS/FAIL line for one acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
