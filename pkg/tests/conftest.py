import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(k, passed, detail):
        line = f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append((k, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
