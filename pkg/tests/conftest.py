import numpy as np
import pytest

from rgm.mdp import TabularMDP


def chain_mdp(gamma=0.5):
    """Two states, one action, deterministic 0 -> 1 -> 0."""
    T = np.zeros((2, 1, 2))
    T[0, 0, 1] = 1.0
    T[1, 0, 0] = 1.0
    return TabularMDP(T, np.array([1.0, 0.0]), gamma)


def single_state_mdp(gamma=0.9, n_actions=1):
    return TabularMDP(np.ones((1, n_actions, 1)), np.array([1.0]), gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def chain():
    return chain_mdp()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
