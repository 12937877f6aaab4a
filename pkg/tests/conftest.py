import pytest

_VERDICTS: list = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict line; the terminal summary prints them in order."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _VERDICTS.append((number, f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance")
    for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(line)
