import pytest

_ACCEPT_LINES: list[str] = []


@pytest.fixture
def accept():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"ACCEPT {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        _ACCEPT_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPT_LINES:
            terminalreporter.write_line(line)
