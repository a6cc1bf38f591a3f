"""Collects one verdict line per acceptance criterion and prints them after the run."""

VERDICTS: dict = {}


def record(number: int, name: str, ok: bool, detail: str = "") -> None:
    VERDICTS[number] = f"criterion {number:2d} {name:<12} {'PASS' if ok else 'FAIL'}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
