import numpy as np
import pytest

from hamdpo import tabular as tb


def value_iteration_eval(game, policy, tol=1e-13):
    """Iterative policy evaluation; independent of the linear-solve path."""
    pj = policy.joint_flat()
    V = np.zeros(game.n_states)
    while True:
        Q = game.reward + game.gamma * np.einsum("sjt,t->sj", game.transition, V)
        V_new = (pj * Q).sum(1)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new, game.reward + game.gamma * np.einsum("sjt,t->sj", game.transition, V_new)
        V = V_new


@pytest.fixture
def game2():
    return tb.random_game(7, n_states=3, action_counts=(2, 3))


@pytest.fixture
def game3():
    return tb.random_game(11, n_states=4, action_counts=(2, 3, 2))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
