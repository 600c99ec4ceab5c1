"""Shared test reporting.

The acceptance tests emit one verdict line per criterion.  Printing
them inside the tests means output capture swallows them on success,
so they are also collected here and re-printed as a terminal-summary
block, which capture cannot touch.
"""

_CRITERION_LINES = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)
