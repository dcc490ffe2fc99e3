import pytest

_criteria = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict: criterion(number, title, ok, detail)."""

    def record(number, title, ok, detail=""):
        _criteria[number] = (title, bool(ok), detail)
        print(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
