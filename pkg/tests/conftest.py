"""Collects acceptance-criterion verdicts and prints them after the run."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(number, passed, detail)`` once per acceptance criterion."""

    def record(number, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _VERDICTS[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
