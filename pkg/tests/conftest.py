import numpy as np
import pytest

from fedsnow.model import Dataset

_acceptance_lines: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(criterion: str, passed: bool, detail: str = "") -> None:
        _acceptance_lines.append(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}".rstrip())

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def separable_2d():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(400, 2))
    y = (x @ np.array([1.5, -1.0]) + 0.2 > 0).astype(int)
    return Dataset(x, y, "separable")


WORKED_ROWS = [
    [1, 0, 0, 1, 1],
    [1, 0, 1, 1, 1],
    [1, 1, 0, 0, 1],
    [1, 0, 0, 0, 1],
    [1, 1, 0, 0, 1],
]
WORKED_CONSENSUS = [1, 0, 0, 0, 1]
