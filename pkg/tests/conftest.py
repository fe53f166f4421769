import sys
from pathlib import Path

import numpy as np
import pytest

import deadend as de
from deadend.mdp import Terminal

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module


def chain_mdp(n_chain: int = 2, terminal: Terminal = Terminal.NEGATIVE) -> de.TabularMDP:
    """Deterministic single-action chain s0 -> s1 -> ... -> terminal."""
    n = n_chain + 1
    t = np.zeros((n, 1, n))
    for s in range(n_chain):
        t[s, 0, s + 1] = 1.0
    t[n - 1, 0, n - 1] = 1.0
    kinds = np.zeros(n, dtype=np.int8)
    kinds[n - 1] = terminal
    return de.TabularMDP(n, 1, t, kinds)


def two_outcome_mdp() -> de.TabularMDP:
    """3 states: a branch state with one action to death, one to recovery."""
    t = np.zeros((3, 2, 3))
    t[0, 0, 1] = 1.0  # action 0 -> negative terminal
    t[0, 1, 2] = 1.0  # action 1 -> positive terminal
    t[1, :, 1] = 1.0
    t[2, :, 2] = 1.0
    return de.TabularMDP(3, 2, t, np.array([0, 2, 1], dtype=np.int8))


@pytest.fixture(scope="session")
def layout():
    return de.LifeGateLayout.default()


@pytest.fixture(scope="session")
def lifegate(layout):
    return de.build_lifegate(layout)


@pytest.fixture(scope="session")
def lifegate_solution(lifegate):
    q_d = de.value_iteration(lifegate, de.DualKind.D)
    q_r = de.value_iteration(lifegate, de.DualKind.R)
    sets = de.classify_special_states(lifegate)
    probs = de.outcome_probabilities(lifegate, sets, q_d, q_r)
    return q_d, q_r, sets, probs


def tiny_random_mdp(seed: int, n_states: int = 5, n_actions: int = 2) -> de.TabularMDP:
    """Small proper random MDP with both terminal kinds (oracle-enumerable)."""
    spec = de.CohortSpec(
        n_states=n_states, n_actions=n_actions, dead_end_fraction=0.25,
        branching=2, seed=seed,
    )
    return de.generate_mdp(spec).mdp
