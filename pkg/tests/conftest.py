"""Shared pytest plumbing.

The acceptance module records one verdict line per criterion; the terminal
summary repeats them in one block so the outcome is readable even when the
individual test output is captured.
"""

VERDICTS = []


def record_verdict(criterion: int, description: str, ok: bool, detail: str = ""):
    line = f"criterion {criterion} ({description}): {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" — {detail}"
    VERDICTS.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.line(line)
