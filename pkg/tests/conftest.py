"""Shared recorder that turns acceptance outcomes into one summary line each."""

import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """``verdict(label, ok, detail)`` prints and records one PASS/FAIL line."""

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
