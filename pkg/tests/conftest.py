"""Print the acceptance PASS/FAIL lines in pytest's terminal summary.

Output written by passing tests is captured and discarded, so the lines are
collected in ``test_acceptance._LINES`` and echoed here at the end of the run.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
