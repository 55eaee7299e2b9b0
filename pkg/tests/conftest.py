import pytest

_criteria: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        _criteria[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
