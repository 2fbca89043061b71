import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Record one acceptance verdict line: ``record(name, ok, detail)``."""

    def add(name, ok, detail):
        _VERDICTS.append((name, bool(ok), detail))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
