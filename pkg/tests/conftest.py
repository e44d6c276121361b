import os

import pytest

# keep ensemble tests on a single process unless the caller asks otherwise
os.environ.setdefault("DECOLAB_THREADS", "1")

ACCEPTANCE_LINES: list[tuple[int, str]] = []


@pytest.fixture
def report():
    """Record one acceptance line; the terminal summary prints them in order."""

    def _report(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
