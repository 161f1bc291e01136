"""Shared pytest wiring.

The acceptance tests record one line per criterion; the terminal summary
hook replays them at the end of the run so they are visible without -s.
"""

import pytest

_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Returns record(name, ok, detail, elapsed, budget) which prints and
    stores one pass/fail line, then asserts the criterion and its budget."""

    def record(name: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
        verdict = "PASS" if ok and elapsed < budget else "FAIL"
        line = f"{verdict}  {name}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
        assert elapsed < budget, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
