import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; printed again in the terminal summary."""

    def _record(number: int, passed: bool, detail: str, seconds: float) -> None:
        line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'} ({seconds:.1f}s): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
