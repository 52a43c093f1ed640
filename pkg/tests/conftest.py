import numpy as np
import pytest

from countmorl.mdp import TabularMdp, random_mdp


@pytest.fixture
def chain_mdp():
    """Two states, two actions; action 1 moves to the rewarding state 1."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, 0, 1] = 1.0
    P[1, 1, 0] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 0.0]])
    return TabularMdp(P, r, 0.9, np.array([1.0, 0.0]), 1.0, name="chain")


@pytest.fixture
def small_random_mdp():
    return random_mdp(4, 3, gamma=0.8, seed=7)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} [{criterion}] {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
