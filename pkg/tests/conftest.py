import re

import pytest

ACCEPTANCE_LINES: dict[int, str] = {}
_CRITERION_TEST = re.compile(r"test_criterion_(\d+)")


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert passed, line

    return record


def pytest_runtest_logreport(report):
    # a criterion test that raised before recording still gets its FAIL line
    m = _CRITERION_TEST.search(report.nodeid)
    if m and report.when == "call" and report.failed:
        number = int(m.group(1))
        if number not in ACCEPTANCE_LINES:
            ACCEPTANCE_LINES[number] = f"criterion {number:2d}: FAIL  raised {report.longrepr.reprcrash.message}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
