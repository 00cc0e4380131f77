import warnings

import pytest

ACCEPTANCE_LINES = []


def record_acceptance(label: str, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_contraction_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="delay condition not met", category=RuntimeWarning)
        yield
