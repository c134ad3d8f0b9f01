"""Dual estimator: learn q close to the target environment's Q-function.

Here the candidate q is scored by discriminating weights w,
    L_q(w, beta, q) = | E_mu[ w beta (q(s,a) - gamma q(s',pi)) ]
                       - E_{d_tr}[ w r ] |,
which vanishes for every w at q = Q^pi of the target environment (with the
true beta), by the Bellman equation.  The return estimate is then
(1-gamma) E_d0[q(s, pi)].  Mirrors of the RKHS closed form and the linear
solve from the w-route apply with the roles of w and q exchanged.
"""

from __future__ import annotations

import math

import numpy as np

from ._moments import (
    d0_moments,
    population_d0_moments,
    population_real_moments,
    population_sim_moments,
    real_moments,
    require_source,
    sim_moments,
)
from .envs import DataSource, TransitionDataset
from .mdp import MDPValidationError, Occupancy, Policy, TabularMDP
from .models import Kernel, WeightClass, WeightModel, as_flat_values
from .weights import (
    MinimaxFitConfig,
    _gram_value,
    _one_hot_support_solve,
    _both_one_hot,
    _quadratic_descent,
    _ridge_solve,
)


def _lq_signed(w: np.ndarray, beta: np.ndarray, q: np.ndarray, mu: np.ndarray,
               next_kernel: np.ndarray, sim_reward: np.ndarray, gamma: float) -> float:
    g = w * beta
    return float(g @ (mu * q) - gamma * g @ (next_kernel @ q) - w @ sim_reward)


def loss_Lq(w, beta, q, real_data: TransitionDataset, sim_data: TransitionDataset,
            pi: Policy, gamma: float) -> float:
    """Empirical |L_q(w, beta, q)| from offline transitions and simulator rewards."""
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    _, r_tr = sim_moments(sim_data)
    return abs(_lq_signed(as_flat_values(w, s, a), as_flat_values(beta, s, a),
                          as_flat_values(q, s, a), mu, kern, r_tr, gamma))


def loss_Lq_population(w, beta, q, mdp_te: TabularMDP, pi: Policy, mu: Occupancy,
                       d_tr: Occupancy) -> float:
    """Exact |L_q| over occupancy tables; rewards are the shared mean table."""
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    _, r_tr = population_sim_moments(d_tr, mdp_te.reward_mean)
    return abs(_lq_signed(as_flat_values(w, s, a), as_flat_values(beta, s, a),
                          as_flat_values(q, s, a), mu_flat, kern, r_tr, mdp_te.gamma))


def _witness_coefficients(beta: np.ndarray, q: np.ndarray, mu: np.ndarray,
                          next_kernel: np.ndarray, sim_reward: np.ndarray,
                          gamma: float) -> np.ndarray:
    """Cell coefficients of the RKHS witness w*; L_q(w, beta, q) = c . w."""
    return beta * (mu * q - gamma * (next_kernel @ q)) - sim_reward


def rkhs_inner_max_w(q, beta, real_data: TransitionDataset, sim_data: TransitionDataset,
                     pi: Policy, gamma: float, kernel: Kernel) -> float:
    """Closed-form max over the RKHS unit ball of L_q(w, beta, q)^2."""
    s, a = real_data.n_states, real_data.n_actions
    if real_data.n == 0 and sim_data.n == 0:
        return 0.0
    mu, kern = real_moments(real_data, pi)
    _, r_tr = sim_moments(sim_data)
    c = _witness_coefficients(as_flat_values(beta, s, a), as_flat_values(q, s, a),
                              mu, kern, r_tr, gamma)
    return _gram_value(c, kernel.full_gram())


def rkhs_inner_max_w_population(q, beta, mdp_te: TabularMDP, pi: Policy, mu: Occupancy,
                                d_tr: Occupancy, kernel: Kernel) -> float:
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    _, r_tr = population_sim_moments(d_tr, mdp_te.reward_mean)
    c = _witness_coefficients(as_flat_values(beta, s, a), as_flat_values(q, s, a),
                              mu_flat, kern, r_tr, mdp_te.gamma)
    return _gram_value(c, kernel.full_gram())


def _linear_q_solve_from_moments(phi, psi, beta_flat, mu, next_kernel, sim_reward, gamma,
                                 ridge_eps, n_states, n_actions, c_q) -> WeightModel:
    # M = E_mu[ beta phi(x) (Psi(x) - gamma Psi(s',pi))^T ],  b = E_{d_tr}[ phi(x) r ]
    core = beta_flat[:, None] * (np.diag(mu) - gamma * next_kernel)
    m = phi.table.T @ core @ psi.table
    b = phi.table.T @ sim_reward
    if _both_one_hot(phi, psi):
        zeta = _one_hot_support_solve(m, b, mu > 0, ridge_eps, "linear q solve")
    else:
        if m.shape[0] != m.shape[1]:
            raise MDPValidationError(f"q solve needs square moment matrix, got {m.shape}")
        zeta = _ridge_solve(m, b, ridge_eps, "linear q solve")
    model = WeightModel("linear", zeta, n_states, n_actions, features=psi, lo=0.0, hi=c_q)
    model.diagnostics["clamp_fraction"] = model.clamp_fraction(mu > 0)
    return model


def linear_q_solve(phi, psi, beta, real_data: TransitionDataset, sim_data: TransitionDataset,
                   pi: Policy, gamma: float, ridge_eps: float = 1e-8,
                   c_q: float = math.inf) -> WeightModel:
    """Closed-form q-fit for linear classes; q_hat = Psi . zeta."""
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    _, r_tr = sim_moments(sim_data)
    return _linear_q_solve_from_moments(phi, psi, as_flat_values(beta, s, a), mu, kern,
                                        r_tr, gamma, ridge_eps, s, a, c_q)


def linear_q_solve_population(phi, psi, beta, mdp_te: TabularMDP, pi: Policy, mu: Occupancy,
                              d_tr: Occupancy, ridge_eps: float = 0.0,
                              c_q: float | None = None) -> WeightModel:
    s, a = mdp_te.n_states, mdp_te.n_actions
    if c_q is None:
        c_q = mdp_te.r_max / (1.0 - mdp_te.gamma)
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    _, r_tr = population_sim_moments(d_tr, mdp_te.reward_mean)
    return _linear_q_solve_from_moments(phi, psi, as_flat_values(beta, s, a), mu_flat, kern,
                                        r_tr, mdp_te.gamma, ridge_eps, s, a, c_q)


def rkhs_q_fit(q_class: WeightClass, beta, real_data: TransitionDataset,
               sim_data: TransitionDataset, pi: Policy, gamma: float,
               kernel: Kernel, cfg: MinimaxFitConfig) -> WeightModel:
    """Descend q on the closed-form sup_w L_q(w, beta, q)^2 (mirror of the w-route fit)."""
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    _, r_tr = sim_moments(sim_data)
    return _rkhs_q_fit_from_moments(q_class, as_flat_values(beta, s, a), mu, kern, r_tr,
                                    gamma, kernel, cfg, s, a)


def rkhs_q_fit_population(q_class: WeightClass, beta, mdp_te: TabularMDP, pi: Policy,
                          mu: Occupancy, d_tr: Occupancy, kernel: Kernel,
                          cfg: MinimaxFitConfig) -> WeightModel:
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    _, r_tr = population_sim_moments(d_tr, mdp_te.reward_mean)
    return _rkhs_q_fit_from_moments(q_class, as_flat_values(beta, s, a), mu_flat, kern, r_tr,
                                    mdp_te.gamma, kernel, cfg, s, a)


def _rkhs_q_fit_from_moments(q_class, beta_flat, mu, next_kernel, sim_reward, gamma,
                             kernel, cfg, n_states, n_actions) -> WeightModel:
    # Witness coefficients are affine in q:  c(q) = A q + b.
    a_cells = beta_flat[:, None] * (np.diag(mu) - gamma * next_kernel)
    b_vec = -sim_reward
    gram = kernel.full_gram()
    model0 = q_class.initial_model(n_states, n_actions)
    if q_class.kind == "tabular":
        params, diag = _quadratic_descent(a_cells, b_vec, gram, model0.params,
                                          (0.0, q_class.c_w), cfg)
    else:
        params, diag = _quadratic_descent(a_cells @ q_class.features.table, b_vec, gram,
                                          model0.params, None, cfg)
    model = WeightModel(model0.kind, params, n_states, n_actions,
                        features=model0.features, lo=0.0, hi=q_class.c_w)
    model.diagnostics.update(diag)
    return model


def ope_from_q(q, d0_data: TransitionDataset, pi: Policy, gamma: float) -> float:
    """(1 - gamma) E_{d0}[ q(s, pi) ] over initial-state samples."""
    require_source(d0_data, DataSource.INITIAL_DIST, "ope_from_q")
    v0 = d0_moments(d0_data, pi)
    qv = as_flat_values(q, d0_data.n_states, d0_data.n_actions)
    return float((1.0 - gamma) * v0 @ qv)


def ope_from_q_population(q, mdp: TabularMDP, pi: Policy) -> float:
    v0 = population_d0_moments(mdp, pi)
    qv = as_flat_values(q, mdp.n_states, mdp.n_actions)
    return float((1.0 - mdp.gamma) * v0 @ qv)
