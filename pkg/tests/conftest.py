"""Shared pytest hooks.

The acceptance tests register one verdict line per release check; they are
echoed in the terminal summary so every line appears exactly once in the
run log, for passing and failing checks alike.
"""

acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_verdicts:
        terminalreporter.section("acceptance checks")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)
