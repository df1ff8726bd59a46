"""Shared fixtures: seeded random instances and a brute-force policy enumerator."""

import itertools

import numpy as np
import pytest

from irlcompat.mdp_core import Policy, RewardSpec, TabularMdp


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int,
               horizon: int) -> TabularMdp:
    p = rng.dirichlet(np.ones(num_states), size=(horizon, num_states, num_actions))
    return TabularMdp(rng.dirichlet(np.ones(num_states)), p)


def random_dense_reward(rng: np.random.Generator, mdp: TabularMdp,
                        low: float = -1.0, high: float = 1.0) -> RewardSpec:
    return RewardSpec.dense(rng.uniform(low, high, size=(mdp.horizon, mdp.num_states,
                                                         mdp.num_actions)))


def random_policy(rng: np.random.Generator, mdp: TabularMdp) -> Policy:
    return Policy(rng.dirichlet(np.ones(mdp.num_actions),
                                size=(mdp.horizon, mdp.num_states)))


def brute_force_optimum(mdp: TabularMdp, table: np.ndarray) -> float:
    """Best return over every deterministic Markov policy."""
    H, S, A = table.shape
    best = -np.inf
    for flat in itertools.product(range(A), repeat=H * S):
        actions = np.array(flat).reshape(H, S)
        v = np.zeros(S)
        for h in range(H - 1, -1, -1):
            a = actions[h]
            v = table[h, np.arange(S), a] + mdp.transitions[h, np.arange(S), a] @ v
        best = max(best, float(mdp.initial_dist @ v))
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_mdp(rng):
    return random_mdp(rng, 4, 3, 3)
