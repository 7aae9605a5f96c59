import pytest

_LINES = []


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(number, title, ok, detail=""):
        _LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
