import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
