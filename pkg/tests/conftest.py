import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (name, every test passed so far, number of tests seen)
_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, name = marker.args
        entry = _CRITERIA.setdefault(number, [name, True, 0])
        entry[1] = entry[1] and report.passed
        entry[2] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, ok, count = _CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name} ({count} checks)"
        )
