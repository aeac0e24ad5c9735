import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    number, name = int(m.group(1)), m.group(2).replace("_", " ")
    failed = report.failed or (report.when == "call" and report.outcome == "skipped")
    if report.when == "call" or failed:
        prev = _outcomes.get(number, (name, "PASS"))[1]
        state = "FAIL" if failed or prev == "FAIL" else ("PASS" if report.passed else "SKIP")
        _outcomes[number] = (name, state)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        name, state = _outcomes[number]
        terminalreporter.write_line(f"criterion {number:2d} {state}: {name}")
