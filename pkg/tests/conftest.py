import numpy as np
import pytest

from herdcast.nn import LstmModel
from herdcast.sim import simulate_batch


@pytest.fixture(scope="session")
def expert_trials():
    return simulate_batch("expert", 2, 3, seed=5)


@pytest.fixture(scope="session")
def novice_trials():
    return simulate_batch("novice", 2, 3, seed=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return LstmModel.initialize(n_features=4, hidden_sizes=(6, 3, 2), n_classes=5, seed=3)


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict; the lines are echoed in the terminal summary."""
    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        _CRITERIA.append(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
