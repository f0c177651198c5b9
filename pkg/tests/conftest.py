"""Collects one status line per acceptance criterion and prints them after the run."""

ACCEPTANCE: dict[int, str] = {}


def record(number: int, name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    print(ACCEPTANCE[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
