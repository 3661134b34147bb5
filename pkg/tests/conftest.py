import pytest

N_CRITERIA = 10
_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion: criterion(number, ok, detail)."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _RESULTS[number] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, max(max(_RESULTS), N_CRITERIA) + 1):
        ok, detail = _RESULTS.get(number, (False, "not run or did not complete"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
