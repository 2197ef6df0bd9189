"""Collects one verdict per acceptance criterion and prints them after the run."""

import pytest

_VERDICTS = {}


class AcceptanceLedger:
    def record(self, number, ok, detail):
        _VERDICTS[number] = (bool(ok), detail)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLedger()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
