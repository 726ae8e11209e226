"""Shared test plumbing: the acceptance summary block."""

import pytest

acceptance_lines = []


@pytest.fixture(scope="session")
def criterion():
    """Record and assert one [PASS]/[FAIL] line per acceptance criterion."""
    def _report(name, ok, detail=""):
        tag = "PASS" if ok else "FAIL"
        line = f"[{tag}] {name}" + (f" -- {detail}" if detail else "")
        acceptance_lines.append(line)
        print(line)
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter, exitstatus):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
