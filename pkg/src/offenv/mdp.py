"""Exact finite-MDP machinery: occupancies, values, Q-functions, Monte Carlo oracles.

Everything here is computed to linear-solve precision and serves as ground
truth for the estimators in the rest of the package.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Tolerance for stored probability distributions (rows of transition kernels,
# initial distributions, policies).
SIMPLEX_ATOL = 1e-12

# Occupancy entries below this are treated as structurally unsupported.
SUPPORT_ATOL = 1e-12

# Dense linear solves only; keep the state-action space at desk scale.
MAX_STATE_ACTIONS = 10_000


class MDPValidationError(ValueError):
    """Raised when a model violates a type invariant; message carries indices."""


class CoverageError(ValueError):
    """Raised when a density-ratio denominator vanishes on the numerator's support."""

    def __init__(self, message: str, pairs: list[tuple[int, int]]):
        super().__init__(message)
        self.pairs = pairs


class SingularSystemError(ValueError):
    """Raised when an exact linear solve fails; signals malformed input."""


def _check_rows_stochastic(mat: np.ndarray, name: str) -> None:
    if np.any(mat < 0):
        idx = tuple(int(i) for i in np.argwhere(mat < 0)[0])
        raise MDPValidationError(f"{name}{idx} is negative: {mat[idx]}")
    sums = mat.sum(axis=-1)
    bad = np.abs(sums - 1.0) > SIMPLEX_ATOL
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise MDPValidationError(f"{name} row {idx} sums to {sums[idx]!r}, expected 1")


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP (S, A, P, R, gamma, d0) with bounded rewards in [0, r_max].

    Rewards are a mean table plus optional uniform noise of the given
    halfwidth, clipped back to [0, r_max] when sampled.
    """

    transition: np.ndarray      # (S, A, S'), each row a distribution
    reward_mean: np.ndarray     # (S, A) in [0, r_max]
    gamma: float
    initial_dist: np.ndarray    # (S,)
    r_max: float
    reward_noise_halfwidth: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "reward_mean", np.asarray(self.reward_mean, dtype=float))
        object.__setattr__(self, "initial_dist", np.asarray(self.initial_dist, dtype=float))
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise MDPValidationError(f"transition must be (S, A, S), got {self.transition.shape}")
        s, a = self.transition.shape[:2]
        if s * a > MAX_STATE_ACTIONS:
            raise MDPValidationError(f"S*A = {s * a} exceeds the dense-solve cap {MAX_STATE_ACTIONS}")
        if self.reward_mean.shape != (s, a):
            raise MDPValidationError(f"reward_mean must be (S, A) = {(s, a)}, got {self.reward_mean.shape}")
        if self.initial_dist.shape != (s,):
            raise MDPValidationError(f"initial_dist must be (S,) = {(s,)}, got {self.initial_dist.shape}")
        if not (0.0 <= self.gamma < 1.0):
            raise MDPValidationError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise MDPValidationError(f"r_max must be positive, got {self.r_max}")
        if self.reward_noise_halfwidth < 0:
            raise MDPValidationError(f"reward_noise_halfwidth must be >= 0, got {self.reward_noise_halfwidth}")
        _check_rows_stochastic(self.transition, "transition")
        _check_rows_stochastic(self.initial_dist[None, :], "initial_dist")
        if np.any(self.reward_mean < 0) or np.any(self.reward_mean > self.r_max):
            bad = np.argwhere((self.reward_mean < 0) | (self.reward_mean > self.r_max))[0]
            idx = tuple(int(i) for i in bad)
            raise MDPValidationError(f"reward_mean{idx} = {self.reward_mean[idx]} outside [0, {self.r_max}]")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class Policy:
    """Stochastic action table pi(a|s), one distribution per state row."""

    action_probs: np.ndarray    # (S, A)

    def __post_init__(self):
        object.__setattr__(self, "action_probs", np.asarray(self.action_probs, dtype=float))
        if self.action_probs.ndim != 2:
            raise MDPValidationError(f"action_probs must be (S, A), got {self.action_probs.shape}")
        _check_rows_stochastic(self.action_probs, "action_probs")

    @property
    def n_states(self) -> int:
        return self.action_probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.action_probs.shape[1]


@dataclass(frozen=True)
class Occupancy:
    """Normalized discounted state-action distribution d(s, a)."""

    dist: np.ndarray            # (S, A), nonnegative, sums to 1

    def __post_init__(self):
        object.__setattr__(self, "dist", np.asarray(self.dist, dtype=float))
        if self.dist.ndim != 2:
            raise MDPValidationError(f"dist must be (S, A), got {self.dist.shape}")
        if np.any(self.dist < 0):
            idx = tuple(int(i) for i in np.argwhere(self.dist < 0)[0])
            raise MDPValidationError(f"dist{idx} is negative: {self.dist[idx]}")
        total = self.dist.sum()
        if abs(total - 1.0) > 1e-10:
            raise MDPValidationError(f"dist sums to {total!r}, expected 1 within 1e-10")

    @property
    def flat(self) -> np.ndarray:
        return self.dist.reshape(-1)


@dataclass(frozen=True)
class QTable:
    """Action-value table Q(s, a), bounded by r_max / (1 - gamma)."""

    values: np.ndarray          # (S, A)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise MDPValidationError(f"values must be (S, A), got {self.values.shape}")

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


class WeightTables(NamedTuple):
    """Exact weight-split tables on the simulator occupancy's support."""

    beta_star: np.ndarray       # (S, A): d_tr / mu, 0 off support
    w_star: np.ndarray          # (S, A): d_te / d_tr, 0 off support
    support_mask: np.ndarray    # (S, A) bool: d_tr > 0


def _check_pair(mdp: TabularMDP, pi: Policy) -> None:
    if pi.action_probs.shape != (mdp.n_states, mdp.n_actions):
        raise MDPValidationError(
            f"policy shape {pi.action_probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def policy_transition_matrix(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    """Flat kernel P_pi[(s,a) -> (s',a')] = P(s'|s,a) * pi(a'|s'), shape (SA, SA)."""
    _check_pair(mdp, pi)
    s, a = mdp.n_states, mdp.n_actions
    flat_p = mdp.transition.reshape(s * a, s)             # (SA, S')
    return (flat_p[:, :, None] * pi.action_probs[None, :, :]).reshape(s * a, s * a)


def initial_state_action_dist(mdp: TabularMDP, pi: Policy) -> np.ndarray:
    """d0(s) * pi(a|s) as a flat (SA,) vector."""
    _check_pair(mdp, pi)
    return (mdp.initial_dist[:, None] * pi.action_probs).reshape(-1)


def _solve(a: np.ndarray, b: np.ndarray, context: str) -> np.ndarray:
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{context}: {exc}") from exc


def state_action_occupancy(mdp: TabularMDP, pi: Policy) -> Occupancy:
    """Solve the Bellman flow equation d = (1-gamma) d0*pi + gamma P_pi^T d exactly."""
    sa = mdp.n_states * mdp.n_actions
    p_pi = policy_transition_matrix(mdp, pi)
    rhs = (1.0 - mdp.gamma) * initial_state_action_dist(mdp, pi)
    d = _solve(np.eye(sa) - mdp.gamma * p_pi.T, rhs, "occupancy solve failed")
    # The solution is a nonnegative Neumann series; wipe solver-level noise.
    d = np.where(np.abs(d) < SUPPORT_ATOL, 0.0, d)
    if np.any(d < 0):
        raise SingularSystemError(f"occupancy solve produced negative mass {d.min()!r}")
    d /= d.sum()
    return Occupancy(d.reshape(mdp.n_states, mdp.n_actions))


def bellman_flow_residual(mdp: TabularMDP, pi: Policy, occ: Occupancy) -> float:
    """Max absolute violation of the Bellman flow equation by `occ`."""
    d = occ.flat
    p_pi = policy_transition_matrix(mdp, pi)
    rhs = (1.0 - mdp.gamma) * initial_state_action_dist(mdp, pi) + mdp.gamma * p_pi.T @ d
    return float(np.max(np.abs(d - rhs)))


def policy_value(mdp: TabularMDP, pi: Policy) -> float:
    """Normalized return J(pi) = sum_{s,a} d(s,a) * reward_mean(s,a)."""
    occ = state_action_occupancy(mdp, pi)
    return float(np.sum(occ.dist * mdp.reward_mean))


def q_function(mdp: TabularMDP, pi: Policy) -> QTable:
    """Solve Q = R + gamma P_pi Q as one dense linear system over (s, a)."""
    sa = mdp.n_states * mdp.n_actions
    p_pi = policy_transition_matrix(mdp, pi)
    r = mdp.reward_mean.reshape(-1)
    q = _solve(np.eye(sa) - mdp.gamma * p_pi, r, "Q-function solve failed")
    return QTable(q.reshape(mdp.n_states, mdp.n_actions))


def state_values(mdp: TabularMDP, pi: Policy, q: QTable | None = None) -> np.ndarray:
    """V(s) = sum_a pi(a|s) Q(s,a)."""
    if q is None:
        q = q_function(mdp, pi)
    return np.sum(pi.action_probs * q.values, axis=1)


def exact_weight_tables(
    mdp_te: TabularMDP,
    mdp_tr: TabularMDP,
    pi: Policy,
    mu: Occupancy,
) -> WeightTables:
    """Split the target-over-data weight into beta* = d_tr/mu and w* = d_te/d_tr.

    Both factors are defined on the simulator occupancy's support; entries
    outside it are zero.  Coverage holes are hard errors because every
    downstream ratio divides by the offending denominator.
    """
    d_tr = state_action_occupancy(mdp_tr, pi).dist
    d_te = state_action_occupancy(mdp_te, pi).dist
    mu_t = mu.dist
    need_mu = (d_tr > SUPPORT_ATOL) | (d_te > SUPPORT_ATOL)
    holes = need_mu & (mu_t <= SUPPORT_ATOL)
    if np.any(holes):
        pairs = [(int(s), int(a)) for s, a in np.argwhere(holes)]
        raise CoverageError(f"mu has no mass on {len(pairs)} supported pairs: {pairs[:10]}", pairs)
    tr_holes = (d_te > SUPPORT_ATOL) & (d_tr <= SUPPORT_ATOL)
    if np.any(tr_holes):
        pairs = [(int(s), int(a)) for s, a in np.argwhere(tr_holes)]
        raise CoverageError(
            f"simulator occupancy has no mass on {len(pairs)} target-supported pairs: {pairs[:10]}", pairs
        )
    support = d_tr > SUPPORT_ATOL
    beta_star = np.zeros_like(d_tr)
    w_star = np.zeros_like(d_tr)
    beta_star[support] = d_tr[support] / mu_t[support]
    w_star[support] = d_te[support] / d_tr[support]
    return WeightTables(beta_star, w_star, support)


def default_horizon(mdp: TabularMDP, truncation_tol: float = 1e-4) -> int:
    """Smallest H with gamma^H * r_max / (1 - gamma) below the truncation tolerance."""
    bound = mdp.r_max / (1.0 - mdp.gamma)
    h = 1
    while bound * mdp.gamma**h >= truncation_tol:
        h += 1
    return h


def _sample_rows(prob_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample one index per row of a (n, k) row-stochastic matrix."""
    cdf = np.cumsum(prob_rows, axis=1)
    u = rng.random(prob_rows.shape[0])
    return np.argmax(u[:, None] < cdf, axis=1)


def _sample_rewards(mdp: TabularMDP, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    r = mdp.reward_mean[s, a]
    if mdp.reward_noise_halfwidth > 0:
        r = r + rng.uniform(-mdp.reward_noise_halfwidth, mdp.reward_noise_halfwidth, size=r.shape)
        r = np.clip(r, 0.0, mdp.r_max)
    return r


def _rollout(
    mdp: TabularMDP, pi: Policy, horizon: int, n_traj: int, seed: int
):
    """Yield (t, s_t, a_t, r_t) for a batch of trajectories, one step at a time."""
    _check_pair(mdp, pi)
    rng = np.random.default_rng(seed)
    s = _sample_rows(np.tile(mdp.initial_dist, (n_traj, 1)), rng)
    for t in range(horizon):
        a = _sample_rows(pi.action_probs[s], rng)
        r = _sample_rewards(mdp, s, a, rng)
        yield t, s, a, r
        s = _sample_rows(mdp.transition[s, a], rng)


def monte_carlo_return(
    mdp: TabularMDP, pi: Policy, horizon: int, n_traj: int, seed: int
) -> tuple[float, float]:
    """Truncated-rollout estimate of the normalized return, with its standard error."""
    returns = np.zeros(n_traj)
    for t, _, _, r in _rollout(mdp, pi, horizon, n_traj, seed):
        returns += mdp.gamma**t * r
    returns *= 1.0 - mdp.gamma
    se = float(returns.std(ddof=1) / np.sqrt(n_traj)) if n_traj > 1 else 0.0
    return float(returns.mean()), se


def monte_carlo_occupancy(
    mdp: TabularMDP, pi: Policy, horizon: int, n_traj: int, seed: int
) -> Occupancy:
    """Discounted visitation counts, normalized to the simplex.

    Truncation at `horizon` discards gamma^horizon of the discounted mass;
    the normalization spreads that bias multiplicatively.
    """
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    for t, s, a, _ in _rollout(mdp, pi, horizon, n_traj, seed):
        np.add.at(counts, (s, a), mdp.gamma**t)
    return Occupancy(counts / counts.sum())


def monte_carlo_occupancy_se(
    mdp: TabularMDP, pi: Policy, horizon: int, n_traj: int, seed: int
) -> tuple[Occupancy, np.ndarray]:
    """As monte_carlo_occupancy, but also return per-cell standard errors."""
    sa = mdp.n_states * mdp.n_actions
    per_traj = np.zeros((n_traj, sa))
    rows = np.arange(n_traj)
    for t, s, a, _ in _rollout(mdp, pi, horizon, n_traj, seed):
        np.add.at(per_traj, (rows, s * mdp.n_actions + a), mdp.gamma**t)
    per_traj *= (1.0 - mdp.gamma) / (1.0 - mdp.gamma**horizon)
    mean = per_traj.mean(axis=0)
    se = per_traj.std(axis=0, ddof=1) / np.sqrt(n_traj)
    occ = Occupancy((mean / mean.sum()).reshape(mdp.n_states, mdp.n_actions))
    return occ, se.reshape(mdp.n_states, mdp.n_actions)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def mdp_to_dict(mdp: TabularMDP) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward_mean": mdp.reward_mean.tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
        "r_max": mdp.r_max,
        "reward_noise_halfwidth": mdp.reward_noise_halfwidth,
    }


def mdp_from_dict(doc: dict) -> TabularMDP:
    for key in ("n_states", "n_actions", "gamma", "transition", "reward_mean", "initial_dist", "r_max"):
        if key not in doc:
            raise MDPValidationError(f"MDP document missing field {key!r}")
    mdp = TabularMDP(
        transition=np.asarray(doc["transition"], dtype=float),
        reward_mean=np.asarray(doc["reward_mean"], dtype=float),
        gamma=float(doc["gamma"]),
        initial_dist=np.asarray(doc["initial_dist"], dtype=float),
        r_max=float(doc["r_max"]),
        reward_noise_halfwidth=float(doc.get("reward_noise_halfwidth", 0.0)),
    )
    if mdp.n_states != int(doc["n_states"]) or mdp.n_actions != int(doc["n_actions"]):
        raise MDPValidationError(
            f"declared sizes ({doc['n_states']}, {doc['n_actions']}) do not match "
            f"arrays ({mdp.n_states}, {mdp.n_actions})"
        )
    return mdp


def save_mdp(mdp: TabularMDP, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(mdp_to_dict(mdp), fh, indent=2)


def load_mdp(path: str) -> TabularMDP:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))


def policy_to_dict(pi: Policy) -> dict:
    return {
        "n_states": pi.n_states,
        "n_actions": pi.n_actions,
        "action_probs": pi.action_probs.tolist(),
    }


def policy_from_dict(doc: dict) -> Policy:
    if "action_probs" not in doc:
        raise MDPValidationError("policy document missing field 'action_probs'")
    return Policy(np.asarray(doc["action_probs"], dtype=float))


def save_policy(pi: Policy, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(policy_to_dict(pi), fh, indent=2)


def load_policy(path: str) -> Policy:
    with open(path) as fh:
        return policy_from_dict(json.load(fh))


def mdp_hash(mdp: TabularMDP) -> str:
    """Stable content hash used to tie serialized datasets to their MDP."""
    blob = json.dumps(mdp_to_dict(mdp), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
