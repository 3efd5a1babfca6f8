from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def boston_path():
    return DATA / "boston.csv"


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Records one pass/fail line per acceptance criterion and prints it immediately."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
