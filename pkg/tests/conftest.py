"""Echo the acceptance verdict lines after the run summary.

test_acceptance.py records one PASS/FAIL line per guarantee in its
VERDICT_LINES list; pytest captures stdout, so without this hook the
verdicts would only surface on failures. The hook prints them once the
run is over, where capture no longer applies.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in sorted(lines):    # cheap checks run out of number order
            terminalreporter.write_line(line)
