"""Minimax estimation of the off-environment correction w = d_te / d_tr.

The loss of a candidate w against a discriminator q,
    L_w(w, beta, q) = | E_mu[ w beta (q(s,a) - gamma q(s',pi)) ]
                       - (1-gamma) E_d0[ q(s,pi) ] |,
is zero for every q exactly at the true correction (with the true beta),
because the target occupancy obeys the Bellman flow equation.  Over an RKHS
unit ball the inner sup has a closed form; over linear classes the whole
argmin does.  A saddle-point variant adapts GradientDICE to the same
beta-reweighted data.  Every operation has an exact-population twin that
consumes occupancy tables instead of samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._moments import (
    d0_moments,
    population_d0_moments,
    population_real_moments,
    population_sim_moments,
    real_moments,
    real_reward_moments,
    require_source,
    sim_moments,
)
from .envs import DataSource, TransitionDataset
from .mdp import MDPValidationError, Occupancy, Policy, TabularMDP
from .models import Kernel, WeightClass, WeightModel, as_flat_values

GRAM_NEG_TOL = 1e-8         # quadratic forms this far below zero signal a broken kernel
DIVERGENCE_LIMIT = 1e6
COND_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """Raised when a saddle-point iteration blows up."""


class SingularSolveError(np.linalg.LinAlgError):
    """Raised when a closed-form solve stays ill-conditioned despite the ridge."""


@dataclass(frozen=True)
class MinimaxFitConfig:
    learning_rate_w: float = 1e-2       # outer (w / tau) step
    learning_rate_inner: float = 1e-1   # inner (f, eta) step
    max_iters: int = 2000
    ridge_eps: float = 1e-8
    gd_lambda: float = 1.0              # GradientDICE normalization weight
    seed: int = 0
    tol: float = 1e-14                  # early exit on gradient / step norm

    def __post_init__(self):
        if self.max_iters < 1:
            raise MDPValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.ridge_eps < 0:
            raise MDPValidationError(f"ridge_eps must be >= 0, got {self.ridge_eps}")


# ---------------------------------------------------------------------------
# The loss L_w and its RKHS inner maximization
# ---------------------------------------------------------------------------

def _lw_signed(g: np.ndarray, q: np.ndarray, mu: np.ndarray, next_kernel: np.ndarray,
               v0: np.ndarray, gamma: float) -> float:
    """E[ g (q - gamma q') ] - (1-gamma) E_d0[q(s,pi)] from cell moments."""
    return float(g @ (mu * q) - gamma * g @ (next_kernel @ q) - (1.0 - gamma) * v0 @ q)


def loss_Lw(w, beta, q, real_data: TransitionDataset, d0_data: TransitionDataset,
            pi: Policy, gamma: float) -> float:
    """Empirical |L_w(w, beta, q)| over an offline dataset and d0 samples."""
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    v0 = d0_moments(d0_data, pi)
    g = as_flat_values(w, s, a) * as_flat_values(beta, s, a)
    return abs(_lw_signed(g, as_flat_values(q, s, a), mu, kern, v0, gamma))


def loss_Lw_population(w, beta, q, mdp_te: TabularMDP, pi: Policy, mu: Occupancy) -> float:
    """Exact |L_w| with expectations taken over occupancy tables."""
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    v0 = population_d0_moments(mdp_te, pi)
    g = as_flat_values(w, s, a) * as_flat_values(beta, s, a)
    return abs(_lw_signed(g, as_flat_values(q, s, a), mu_flat, kern, v0, gamma=mdp_te.gamma))


def _rkhs_coefficients(g: np.ndarray, mu: np.ndarray, next_kernel: np.ndarray,
                       v0: np.ndarray, gamma: float) -> np.ndarray:
    """Cell coefficients of the RKHS witness q*; L_w(w, beta, q) = c . q."""
    return mu * g - gamma * (next_kernel.T @ g) - (1.0 - gamma) * v0


def _gram_value(c: np.ndarray, gram: np.ndarray) -> float:
    val = float(c @ gram @ c)
    if val < -GRAM_NEG_TOL:
        raise MDPValidationError(f"Gram quadratic form is negative ({val}); kernel is not PSD")
    return max(val, 0.0)


def rkhs_inner_max(w, beta, real_data: TransitionDataset, d0_data: TransitionDataset,
                   pi: Policy, gamma: float, kernel: Kernel) -> float:
    """Closed-form max over the RKHS unit ball of L_w(w, beta, q)^2.

    The sup equals the squared RKHS norm of the witness embedding; it is
    assembled as one quadratic form over state-action cells.
    """
    s, a = real_data.n_states, real_data.n_actions
    if real_data.n == 0 and d0_data.n == 0:
        return 0.0
    mu, kern = real_moments(real_data, pi)
    v0 = d0_moments(d0_data, pi)
    g = as_flat_values(w, s, a) * as_flat_values(beta, s, a)
    c = _rkhs_coefficients(g, mu, kern, v0, gamma)
    return _gram_value(c, kernel.full_gram())


def rkhs_inner_max_population(w, beta, mdp_te: TabularMDP, pi: Policy, mu: Occupancy,
                              kernel: Kernel) -> float:
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    v0 = population_d0_moments(mdp_te, pi)
    g = as_flat_values(w, s, a) * as_flat_values(beta, s, a)
    c = _rkhs_coefficients(g, mu_flat, kern, v0, mdp_te.gamma)
    return _gram_value(c, kernel.full_gram())


# ---------------------------------------------------------------------------
# Linear closed form
# ---------------------------------------------------------------------------

def _ridge_solve(m: np.ndarray, b: np.ndarray, ridge_eps: float, context: str) -> np.ndarray:
    m_r = m + ridge_eps * np.eye(m.shape[0])
    cond = np.linalg.cond(m_r)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSolveError(f"{context}: condition number {cond:.3e} exceeds {COND_LIMIT:.0e}")
    return np.linalg.solve(m_r, b)


def _one_hot_support_solve(m: np.ndarray, b: np.ndarray, support: np.ndarray,
                           ridge_eps: float, context: str) -> np.ndarray:
    """Solve the square subsystem on observed cells; unidentified cells get 0."""
    idx = np.flatnonzero(support)
    out = np.zeros(m.shape[0])
    if idx.size:
        out[idx] = _ridge_solve(m[np.ix_(idx, idx)], b[idx], ridge_eps, context)
    return out


def _both_one_hot(phi, psi) -> bool:
    return phi.is_one_hot_identity() and psi.is_one_hot_identity()


def _linear_weight_solve_from_moments(phi, psi, beta_flat, mu, next_kernel, v0, gamma,
                                      ridge_eps, n_states, n_actions, c_w=math.inf) -> WeightModel:
    # M = E[ beta (Psi(x) - gamma Psi(s',pi)) phi(x)^T ],  b = (1-gamma) E_d0[Psi(s,pi)]
    core = np.diag(mu * beta_flat) - gamma * (next_kernel.T * beta_flat[None, :])
    m = psi.table.T @ core @ phi.table
    b = (1.0 - gamma) * psi.table.T @ v0
    if _both_one_hot(phi, psi):
        alpha = _one_hot_support_solve(m, b, mu > 0, ridge_eps, "linear weight solve")
    else:
        if m.shape[0] != m.shape[1]:
            raise MDPValidationError(f"weight solve needs square moment matrix, got {m.shape}")
        alpha = _ridge_solve(m, b, ridge_eps, "linear weight solve")
    model = WeightModel("linear", alpha, n_states, n_actions, features=phi, lo=0.0, hi=c_w)
    model.diagnostics["clamp_fraction"] = model.clamp_fraction(mu > 0)
    return model


def linear_weight_solve(phi, psi, beta, real_data: TransitionDataset, d0_data: TransitionDataset,
                        pi: Policy, gamma: float, ridge_eps: float = 1e-8,
                        c_w: float = math.inf) -> WeightModel:
    """Closed-form w-fit for linear classes w = phi . alpha with discriminators psi . zeta.

    Negative evaluations clamp to 0 at use sites; the clamped fraction over the
    observed support is reported in the diagnostics.
    """
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    v0 = d0_moments(d0_data, pi)
    return _linear_weight_solve_from_moments(
        phi, psi, as_flat_values(beta, s, a), mu, kern, v0, gamma, ridge_eps, s, a, c_w
    )


def linear_weight_solve_population(phi, psi, beta, mdp_te: TabularMDP, pi: Policy,
                                   mu: Occupancy, ridge_eps: float = 0.0,
                                   c_w: float = math.inf) -> WeightModel:
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    v0 = population_d0_moments(mdp_te, pi)
    return _linear_weight_solve_from_moments(
        phi, psi, as_flat_values(beta, s, a), mu_flat, kern, v0, mdp_te.gamma, ridge_eps, s, a, c_w
    )


# ---------------------------------------------------------------------------
# Gradient fit of w against the RKHS closed-form objective
# ---------------------------------------------------------------------------

def _quadratic_descent(a_mat: np.ndarray, b_vec: np.ndarray, gram: np.ndarray,
                       params0: np.ndarray, box: tuple[float, float] | None,
                       cfg: MinimaxFitConfig) -> tuple[np.ndarray, dict]:
    """Projected gradient descent on J(p) = (A p + b)^T G (A p + b).

    Returns the earliest iterate achieving the best objective.  The step is
    capped at the curvature bound of the quadratic so the stated learning rate
    can never diverge.
    """
    h = a_mat.T @ gram @ a_mat
    g0 = a_mat.T @ gram @ b_vec
    j_const = float(b_vec @ gram @ b_vec)
    lam_max = float(np.linalg.eigvalsh((h + h.T) / 2.0)[-1]) if h.size else 0.0
    lr = cfg.learning_rate_w if lam_max <= 0 else min(cfg.learning_rate_w, 0.95 / lam_max)

    def objective(p):
        return float(p @ h @ p + 2.0 * g0 @ p + j_const)

    params = params0.copy()
    best = (objective(params), 0, params.copy())
    trace = [best[0]]
    for it in range(1, cfg.max_iters + 1):
        grad = 2.0 * (h @ params + g0)
        params = params - lr * grad
        if box is not None:
            params = np.clip(params, box[0], box[1])
        j = objective(params)
        trace.append(j)
        if j < best[0]:
            best = (j, it, params.copy())
        if np.linalg.norm(grad) < cfg.tol:
            break
    diag = {"trace": trace, "best_iter": best[1], "best_objective": max(best[0], 0.0),
            "learning_rate_effective": lr, "converged": np.linalg.norm(grad) < cfg.tol}
    return best[2], diag


def rkhs_weight_fit(w_class: WeightClass, beta, real_data: TransitionDataset,
                    d0_data: TransitionDataset, pi: Policy, gamma: float,
                    kernel: Kernel, cfg: MinimaxFitConfig) -> WeightModel:
    """Descend w on the closed-form sup_q L_w(w, beta, q)^2 over the RKHS unit ball."""
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    v0 = d0_moments(d0_data, pi)
    return _rkhs_weight_fit_from_moments(w_class, as_flat_values(beta, s, a), mu, kern, v0,
                                         gamma, kernel, cfg, s, a)


def rkhs_weight_fit_population(w_class: WeightClass, beta, mdp_te: TabularMDP, pi: Policy,
                               mu: Occupancy, kernel: Kernel, cfg: MinimaxFitConfig) -> WeightModel:
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    v0 = population_d0_moments(mdp_te, pi)
    return _rkhs_weight_fit_from_moments(w_class, as_flat_values(beta, s, a), mu_flat, kern, v0,
                                         mdp_te.gamma, kernel, cfg, s, a)


def _rkhs_weight_fit_from_moments(w_class, beta_flat, mu, next_kernel, v0, gamma,
                                  kernel, cfg, n_states, n_actions) -> WeightModel:
    # Witness coefficients are affine in w:  c(w) = A w + b.
    a_cells = np.diag(mu * beta_flat) - gamma * next_kernel.T * beta_flat[None, :]
    b_vec = -(1.0 - gamma) * v0
    gram = kernel.full_gram()
    model0 = w_class.initial_model(n_states, n_actions)
    if w_class.kind == "tabular":
        params, diag = _quadratic_descent(a_cells, b_vec, gram, model0.params,
                                          (0.0, w_class.c_w), cfg)
    else:
        params, diag = _quadratic_descent(a_cells @ w_class.features.table, b_vec, gram,
                                          model0.params, None, cfg)
    model = WeightModel(model0.kind, params, n_states, n_actions,
                        features=model0.features, lo=0.0, hi=w_class.c_w)
    model.diagnostics.update(diag)
    return model


# ---------------------------------------------------------------------------
# beta-GradientDICE
# ---------------------------------------------------------------------------

def _dice_iterate(c_mat: np.ndarray, d_tr: np.ndarray, v0: np.ndarray, gamma: float,
                  tau_class: WeightClass, f_class: WeightClass,
                  cfg: MinimaxFitConfig, n_states: int, n_actions: int) -> WeightModel:
    """Alternating ascent (f, eta) / descent (tau) on the DICE saddle objective.

    All quantities are restricted to the support of the simulator occupancy
    (off-support the -f^2/2 penalty vanishes and the inner sup is unbounded).
    For tabular classes the gradient steps are taken per unit of simulator
    occupancy mass, mirroring the per-sample updates of the stochastic
    algorithm; the stated learning rates then act on visit-normalized scales.
    The normalization penalty is the Fenchel form of
    (lambda/2) (E_{d_tr}[tau] - 1)^2, i.e. lambda (eta E[tau] - eta - eta^2/2).
    """
    support = d_tr > 0
    idx = np.flatnonzero(support)
    if idx.size == 0:
        raise MDPValidationError("GradientDICE fit has empty simulator support")
    c_s = c_mat[np.ix_(idx, idx)]
    d_s = d_tr[idx]
    v0_s = v0[idx]
    lam = cfg.gd_lambda

    tabular = tau_class.kind == "tabular" and f_class.kind == "tabular"
    if not tabular and (tau_class.kind != "linear" or f_class.kind != "linear"):
        raise MDPValidationError("tau and f classes must both be tabular or both linear")

    if tabular:
        tau = np.asarray(tau_class.initial_model(n_states, n_actions).params, dtype=float)[idx]
        f = np.zeros(idx.size)
    else:
        phi_tau = tau_class.features.table[idx]
        phi_f = f_class.features.table[idx]
        alpha_tau = tau_class.initial_model(n_states, n_actions).params.copy()
        alpha_f = np.zeros(phi_f.shape[1])
    eta = 0.0

    trace = []
    for it in range(cfg.max_iters):
        if tabular:
            tau_v, f_v = tau, f
        else:
            tau_v, f_v = phi_tau @ alpha_tau, phi_f @ alpha_f
        # value-space gradients of L on the support
        grad_f = (1.0 - gamma) * v0_s + c_s.T @ tau_v - d_s * tau_v - d_s * f_v
        grad_tau = c_s @ f_v - d_s * f_v + lam * eta * d_s
        grad_eta = lam * (float(d_s @ tau_v) - 1.0 - eta)
        if tabular:
            f = f + cfg.learning_rate_inner * grad_f / d_s
            tau = tau - cfg.learning_rate_w * grad_tau / d_s
        else:
            alpha_f = alpha_f + cfg.learning_rate_inner * (phi_f.T @ grad_f)
            alpha_tau = alpha_tau - cfg.learning_rate_w * (phi_tau.T @ grad_tau)
        eta = eta + cfg.learning_rate_inner * grad_eta
        if it % 25 == 0 or it == cfg.max_iters - 1:
            scale = max(np.max(np.abs(tau_v)), np.max(np.abs(f_v)), abs(eta))
            if not np.isfinite(scale) or scale > DIVERGENCE_LIMIT:
                raise DivergenceError(f"GradientDICE diverged at iteration {it}: scale {scale:.3e}")
            trace.append(float(np.max(np.abs(grad_tau)) + np.max(np.abs(grad_f))))

    if tabular:
        params = np.asarray(tau_class.initial_model(n_states, n_actions).params, dtype=float)
        params[idx] = tau
        model = WeightModel("tabular", params, n_states, n_actions, lo=0.0, hi=tau_class.c_w)
    else:
        model = WeightModel("linear", alpha_tau, n_states, n_actions,
                            features=tau_class.features, lo=0.0, hi=tau_class.c_w)
    model.diagnostics.update(trace=trace, eta=eta, support_size=int(idx.size))
    return model


def beta_gradient_dice_fit(tau_class: WeightClass, f_class: WeightClass, beta,
                           real_data: TransitionDataset, sim_data: TransitionDataset,
                           d0_data: TransitionDataset, pi: Policy, gamma: float,
                           cfg: MinimaxFitConfig) -> WeightModel:
    """GradientDICE adapted to the split weight: the flow term is beta-reweighted
    onto offline data while the remaining expectations use simulator samples."""
    s, a = real_data.n_states, real_data.n_actions
    mu, kern = real_moments(real_data, pi)
    v0 = d0_moments(d0_data, pi)
    d_tr, _ = sim_moments(sim_data)
    beta_flat = as_flat_values(beta, s, a)
    c_mat = gamma * (kern * beta_flat[:, None])
    return _dice_iterate(c_mat, d_tr, v0, gamma, tau_class, f_class, cfg, s, a)


def beta_gradient_dice_fit_population(tau_class: WeightClass, f_class: WeightClass, beta,
                                      mdp_te: TabularMDP, pi: Policy, mu: Occupancy,
                                      d_tr: Occupancy, cfg: MinimaxFitConfig) -> WeightModel:
    """Population-gradient mode: exact expectations, no sampling noise."""
    s, a = mdp_te.n_states, mdp_te.n_actions
    mu_flat, kern = population_real_moments(mdp_te, pi, mu)
    v0 = population_d0_moments(mdp_te, pi)
    beta_flat = as_flat_values(beta, s, a)
    c_mat = mdp_te.gamma * (kern * beta_flat[:, None])
    return _dice_iterate(c_mat, d_tr.flat, v0, mdp_te.gamma, tau_class, f_class, cfg, s, a)


# ---------------------------------------------------------------------------
# Final return estimate
# ---------------------------------------------------------------------------

def ope_estimate(w_hat, sim_data: TransitionDataset, normalize: bool = False) -> float:
    """E_{d_tr}[w r] over simulator occupancy samples with shared-reward draws."""
    require_source(sim_data, DataSource.SIMULATOR_OCCUPANCY, "ope_estimate")
    d_hat, r_hat = sim_moments(sim_data)
    w = as_flat_values(w_hat, sim_data.n_states, sim_data.n_actions)
    est = float(w @ r_hat)
    if normalize:
        mass = float(w @ d_hat)
        if mass <= 0:
            raise MDPValidationError("cannot normalize: E_{d_tr}[w] is nonpositive")
        est /= mass
    return est


def ope_estimate_population(w_hat, d_tr: Occupancy, reward_mean: np.ndarray,
                            normalize: bool = False) -> float:
    s, a = d_tr.dist.shape
    d, r = population_sim_moments(d_tr, reward_mean)
    w = as_flat_values(w_hat, s, a)
    est = float(w @ r)
    if normalize:
        mass = float(w @ d)
        if mass <= 0:
            raise MDPValidationError("cannot normalize: E_{d_tr}[w] is nonpositive")
        est /= mass
    return est


def ope_estimate_reweighted(w_hat, beta, real_data: TransitionDataset) -> float:
    """Ablation path: E_mu[w beta r] on real-environment rewards."""
    require_source(real_data, DataSource.REAL_ENV, "ope_estimate_reweighted")
    r_hat = real_reward_moments(real_data)
    s, a = real_data.n_states, real_data.n_actions
    g = as_flat_values(w_hat, s, a) * as_flat_values(beta, s, a)
    return float(g @ r_hat)
