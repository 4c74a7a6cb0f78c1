"""Shared pytest wiring: surface the acceptance scorecard after the run.

The acceptance tests print their ``criterion N (...): PASS|FAIL`` lines,
but pytest captures stdout of passing tests. Collecting the lines here
and replaying them in the terminal summary keeps the scorecard visible
in a plain ``pytest -v`` log.
"""

CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.line(line)
