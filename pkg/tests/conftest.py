import numpy as np
import pytest

_CRITERIA: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    """Remember one acceptance line; printed in the terminal summary."""
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _CRITERIA.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
