import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number: int, passed: bool, detail: str, soft: bool = False):
        verdict = "PASS" if passed else ("WARN" if soft else "FAIL")
        _CRITERIA[number] = f"criterion {number}: {verdict}  {detail}"
        print(_CRITERIA[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
