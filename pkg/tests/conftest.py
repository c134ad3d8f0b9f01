"""Shared builders for random MDP instances and sim/real pairs."""

from __future__ import annotations

import numpy as np
import pytest

from offenv import Policy, TabularMDP, state_action_occupancy


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               gamma: float, r_max: float = 1.0) -> TabularMDP:
    return TabularMDP(
        transition=rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)),
        reward_mean=rng.uniform(0.0, r_max, size=(n_states, n_actions)),
        gamma=gamma,
        initial_dist=rng.dirichlet(np.ones(n_states)),
        r_max=r_max,
    )


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                  concentration: float = 1.0) -> Policy:
    return Policy(rng.dirichlet(concentration * np.ones(n_actions), size=n_states))


def perturb_dynamics(mdp: TabularMDP, rng: np.random.Generator, eta: float = 0.3) -> TabularMDP:
    """A second MDP differing only in dynamics: mix with a random kernel."""
    noise = rng.dirichlet(np.ones(mdp.n_states), size=(mdp.n_states, mdp.n_actions))
    return TabularMDP(
        transition=(1.0 - eta) * mdp.transition + eta * noise,
        reward_mean=mdp.reward_mean,
        gamma=mdp.gamma,
        initial_dist=mdp.initial_dist,
        r_max=mdp.r_max,
        reward_noise_halfwidth=mdp.reward_noise_halfwidth,
    )


def random_pair(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2,
                gamma: float = 0.9, eta: float = 0.3):
    """(mdp_tr, mdp_te, pi_target, mu_occupancy) with full coverage."""
    mdp_tr = random_mdp(rng, n_states, n_actions, gamma)
    mdp_te = perturb_dynamics(mdp_tr, rng, eta)
    pi = random_policy(rng, n_states, n_actions, concentration=2.0)
    pi_b = random_policy(rng, n_states, n_actions, concentration=2.0)
    mu = state_action_occupancy(mdp_te, pi_b)
    return mdp_tr, mdp_te, pi, mu


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(2024)
