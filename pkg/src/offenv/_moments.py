"""Cell-level sufficient statistics shared by every estimator.

On a finite state-action space all empirical expectations that the losses
need collapse onto (S*A)-sized tables after one pass over the data: a cell
weight vector for the offline distribution, an (S*A, S*A) next-cell kernel
carrying the observed transitions pushed through the target policy, and
weight vectors for the initial-state and simulator samples.  Population
variants fill the same tables from exact occupancies, so each estimator is
written once against this interface.
"""

from __future__ import annotations

import numpy as np

from .envs import DataSource, SourceMismatchError, TransitionDataset
from .mdp import Occupancy, Policy, TabularMDP, initial_state_action_dist, policy_transition_matrix


def _pi_key(pi: Policy) -> bytes:
    return pi.action_probs.tobytes()


def require_source(ds: TransitionDataset, expected: DataSource, what: str) -> None:
    if ds.source != expected:
        raise SourceMismatchError(f"{what} expects source={expected.value!r}, got {ds.source.value!r}")


def real_moments(ds: TransitionDataset, pi: Policy) -> tuple[np.ndarray, np.ndarray]:
    """(mu_hat, next_kernel) for an offline dataset.

    mu_hat[x]         = (1/n) sum_i 1{x_i = x}
    next_kernel[x, y] = (1/n) sum_i 1{x_i = x} P_hat-part: pi(a_y | s_y) 1{s'_i = s_y}
    """
    require_source(ds, DataSource.REAL_ENV, "real-environment moments")
    key = ("real", _pi_key(pi))
    if key in ds._cache:
        return ds._cache[key]
    n_cells = ds.n_states * ds.n_actions
    mu_hat = np.bincount(ds.flat_cells, minlength=n_cells) / max(ds.n, 1)
    counts = np.zeros((n_cells, ds.n_states))
    np.add.at(counts, (ds.flat_cells, ds.s_next), 1.0)
    counts /= max(ds.n, 1)
    pi_flat = pi.action_probs.reshape(-1)
    cell_state = np.repeat(np.arange(ds.n_states), ds.n_actions)
    next_kernel = counts[:, cell_state] * pi_flat[None, :]
    ds._cache[key] = (mu_hat, next_kernel)
    return mu_hat, next_kernel


def real_reward_moments(ds: TransitionDataset) -> np.ndarray:
    """(1/n) sum_i r_i 1{x_i = x}, for reweighted-reward estimates on offline data."""
    require_source(ds, DataSource.REAL_ENV, "real-environment reward moments")
    key = ("real_reward",)
    if key in ds._cache:
        return ds._cache[key]
    n_cells = ds.n_states * ds.n_actions
    out = np.bincount(ds.flat_cells, weights=ds.r, minlength=n_cells) / max(ds.n, 1)
    ds._cache[key] = out
    return out


def d0_moments(ds: TransitionDataset, pi: Policy) -> np.ndarray:
    """v0[x=(s,a)] = d0_hat(s) pi(a|s); E_{d0_hat}[q(s, pi)] = v0 . q."""
    require_source(ds, DataSource.INITIAL_DIST, "initial-state moments")
    key = ("d0", _pi_key(pi))
    if key in ds._cache:
        return ds._cache[key]
    d0_hat = np.bincount(ds.s, minlength=ds.n_states) / max(ds.n, 1)
    out = (d0_hat[:, None] * pi.action_probs).reshape(-1)
    ds._cache[key] = out
    return out


def sim_moments(ds: TransitionDataset) -> tuple[np.ndarray, np.ndarray]:
    """(d_tr_hat, reward_sum_hat) for simulator occupancy samples."""
    require_source(ds, DataSource.SIMULATOR_OCCUPANCY, "simulator moments")
    key = ("sim",)
    if key in ds._cache:
        return ds._cache[key]
    n_cells = ds.n_states * ds.n_actions
    d_hat = np.bincount(ds.flat_cells, minlength=n_cells) / max(ds.n, 1)
    r_hat = np.bincount(ds.flat_cells, weights=ds.r, minlength=n_cells) / max(ds.n, 1)
    ds._cache[key] = (d_hat, r_hat)
    return d_hat, r_hat


def population_real_moments(
    mdp_te: TabularMDP, pi: Policy, mu: Occupancy
) -> tuple[np.ndarray, np.ndarray]:
    """Exact (mu, next_kernel): next_kernel = diag(mu) P^te_pi."""
    mu_flat = mu.flat
    return mu_flat, mu_flat[:, None] * policy_transition_matrix(mdp_te, pi)


def population_d0_moments(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    return initial_state_action_dist(mdp, pi)


def population_sim_moments(d_tr: Occupancy, reward_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = d_tr.flat
    return d, d * np.asarray(reward_mean, dtype=float).reshape(-1)
