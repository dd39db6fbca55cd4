import pytest

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion (echoed in the terminal summary)."""
    def report(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
