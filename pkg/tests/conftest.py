import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_outcomes: dict = {}
_details: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        ok = report.outcome == "passed"
        _outcomes[n] = _outcomes.get(n, True) and ok
    for key, value in report.user_properties:
        if key == "detail":
            _details.setdefault(n, []).append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        detail = "; ".join(dict.fromkeys(_details.get(n, [])))
        line = f"criterion {n:2d}: {'PASS' if _outcomes[n] else 'FAIL'}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
