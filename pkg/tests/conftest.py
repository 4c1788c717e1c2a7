import numpy as np
import pytest

from secest.process_model import SystemModel, generate_random_system


@pytest.fixture
def scalar_model():
    # A=0.5, C=1, Q=1, R=1 with two identical sensors folded into one row
    return SystemModel(A=[[0.5]], Q=[[1.0]], C=[[1.0], [1.0]], R=np.eye(2), N=2, k=1, n0=1)


@pytest.fixture
def five_sensor_model():
    return generate_random_system(2, 5, 2, 2, seed=7)


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
