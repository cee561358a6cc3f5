import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record the outcome of one acceptance criterion; returns the pass flag."""

    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
