"""Sim2sim experiment construction: noisy gridworld pairs, mixed policies, datasets.

The gridworld stands in for the usual tabular benchmark: intended moves
succeed with probability 1 - eps and are replaced by a uniformly random
neighboring move with probability eps.  A pair of MDPs differing only in
eps plays the role of simulator and "real" environment.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .mdp import (
    MDPValidationError,
    Occupancy,
    Policy,
    TabularMDP,
    mdp_hash,
    q_function,
    state_action_occupancy,
)

NOISE_KERNEL = "uniform_neighbor_moves"

# Moves indexed as up, right, down, left in (row, col) deltas.
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class GridworldSpec:
    """Rectangular grid with an absorbing goal cell and move noise."""

    width: int
    height: int
    goal: tuple[int, int]           # (row, col)
    step_reward: float = 0.0
    goal_reward: float = 1.0
    noise_eps: float = 0.0
    gamma: float = 0.95
    r_max: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MDPValidationError(f"grid must be nonempty, got {self.width}x{self.height}")
        gr, gc = self.goal
        if not (0 <= gr < self.height and 0 <= gc < self.width):
            raise MDPValidationError(f"goal {self.goal} outside {self.height}x{self.width} grid")
        if not (0.0 <= self.noise_eps <= 1.0):
            raise MDPValidationError(f"noise_eps must be in [0, 1], got {self.noise_eps}")
        for name in ("step_reward", "goal_reward"):
            val = getattr(self, name)
            if not (0.0 <= val <= self.r_max):
                raise MDPValidationError(f"{name} = {val} outside [0, {self.r_max}]")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def cell_index(self, row: int, col: int) -> int:
        return row * self.width + col

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "goal": list(self.goal),
            "step_reward": self.step_reward, "goal_reward": self.goal_reward,
            "noise_eps": self.noise_eps, "gamma": self.gamma, "r_max": self.r_max,
        }

    @staticmethod
    def from_dict(doc: dict) -> "GridworldSpec":
        return GridworldSpec(
            width=int(doc["width"]), height=int(doc["height"]),
            goal=(int(doc["goal"][0]), int(doc["goal"][1])),
            step_reward=float(doc.get("step_reward", 0.0)),
            goal_reward=float(doc.get("goal_reward", 1.0)),
            noise_eps=float(doc.get("noise_eps", 0.0)),
            gamma=float(doc.get("gamma", 0.95)),
            r_max=float(doc.get("r_max", 1.0)),
        )


def _move_target(spec: GridworldSpec, state: int, move: int) -> int:
    row, col = divmod(state, spec.width)
    dr, dc = MOVES[move]
    nr = min(max(row + dr, 0), spec.height - 1)
    nc = min(max(col + dc, 0), spec.width - 1)
    return spec.cell_index(nr, nc)


def build_gridworld(spec: GridworldSpec, eps: float) -> TabularMDP:
    """Gridworld MDP with move noise eps; the goal cell is absorbing."""
    n, n_act = spec.n_states, len(MOVES)
    goal = spec.cell_index(*spec.goal)
    transition = np.zeros((n, n_act, n))
    for s in range(n):
        if s == goal:
            transition[s, :, s] = 1.0
            continue
        for a in range(n_act):
            transition[s, a, _move_target(spec, s, a)] += 1.0 - eps
            for m in range(n_act):
                transition[s, a, _move_target(spec, s, m)] += eps / n_act
    reward = np.full((n, n_act), spec.step_reward)
    reward[goal, :] = spec.goal_reward
    # Start anywhere except the goal.
    d0 = np.ones(n)
    d0[goal] = 0.0
    d0 /= d0.sum()
    return TabularMDP(
        transition=transition,
        reward_mean=reward,
        gamma=spec.gamma,
        initial_dist=d0,
        r_max=spec.r_max,
    )


def build_gridworld_pair(
    spec: GridworldSpec, eps_sim: float, eps_real: float
) -> tuple[TabularMDP, TabularMDP]:
    """Simulator / real-environment pair differing only in the move noise."""
    return build_gridworld(spec, eps_sim), build_gridworld(spec, eps_real)


@dataclass(frozen=True)
class PolicyMixSpec:
    """A pretrained base policy softened by mixing with the uniform policy."""

    base_policy: Policy
    mix_rate: float                 # delta for behavior, alpha for target

    def __post_init__(self):
        if not (0.0 <= self.mix_rate <= 1.0):
            raise MDPValidationError(f"mix_rate must be in [0, 1], got {self.mix_rate}")

    def mixed(self) -> Policy:
        return mix_policy(self.base_policy, self.mix_rate)


def mix_policy(base: Policy, rate: float) -> Policy:
    """(1 - rate) * base + rate * uniform, rowwise."""
    if not (0.0 <= rate <= 1.0):
        raise MDPValidationError(f"mix rate must be in [0, 1], got {rate}")
    uniform = 1.0 / base.n_actions
    return Policy((1.0 - rate) * base.action_probs + rate * uniform)


def optimal_policy(mdp: TabularMDP, max_iters: int = 1000) -> Policy:
    """Exact policy iteration; greedy ties break toward the lowest action index."""
    s, a = mdp.n_states, mdp.n_actions
    probs = np.zeros((s, a))
    probs[:, 0] = 1.0
    pi = Policy(probs)
    for _ in range(max_iters):
        q = q_function(mdp, pi).values
        greedy = np.argmax(q, axis=1)
        new = np.zeros((s, a))
        new[np.arange(s), greedy] = 1.0
        if np.array_equal(new, pi.action_probs):
            return pi
        pi = Policy(new)
    raise MDPValidationError(f"policy iteration did not converge in {max_iters} sweeps")


class DataSource(str, Enum):
    REAL_ENV = "real_env"
    SIMULATOR_OCCUPANCY = "simulator_occupancy"
    INITIAL_DIST = "initial_dist"


SENTINEL = -1   # action / next-state placeholder for initial-state samples


@dataclass(eq=False)
class TransitionDataset:
    """i.i.d. tuples (s, a, r, s') plus the provenance needed to reproduce them."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    seed: int
    source: DataSource
    n_states: int
    n_actions: int
    mdp_hash: str = ""

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=int)
        self.a = np.asarray(self.a, dtype=int)
        self.r = np.asarray(self.r, dtype=float)
        self.s_next = np.asarray(self.s_next, dtype=int)
        self.source = DataSource(self.source)
        if not (len(self.s) == len(self.a) == len(self.r) == len(self.s_next)):
            raise MDPValidationError("dataset columns have mismatched lengths")
        if self.n and (self.s.min() < 0 or self.s.max() >= self.n_states):
            raise MDPValidationError("state index out of bounds")
        if self.n and self.source != DataSource.INITIAL_DIST:
            if self.a.min() < 0 or self.a.max() >= self.n_actions:
                raise MDPValidationError("action index out of bounds")
            if self.s_next.min() < 0 or self.s_next.max() >= self.n_states:
                raise MDPValidationError("next-state index out of bounds")
        self._cache: dict = {}

    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def flat_cells(self) -> np.ndarray:
        return self.s * self.n_actions + self.a


def _require_source(ds: TransitionDataset, expected: DataSource, what: str) -> None:
    if ds.source != expected:
        raise SourceMismatchError(f"{what} expects source={expected.value!r}, got {ds.source.value!r}")


class SourceMismatchError(ValueError):
    """Raised when a dataset of the wrong provenance is passed to an estimator."""


def _sample_cells(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights / weights.sum())
    return np.searchsorted(cdf, rng.random(n), side="right").clip(0, len(weights) - 1)


def _draw_rewards(mdp: TabularMDP, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    r = mdp.reward_mean[s, a]
    if mdp.reward_noise_halfwidth > 0:
        r = np.clip(
            r + rng.uniform(-mdp.reward_noise_halfwidth, mdp.reward_noise_halfwidth, size=r.shape),
            0.0, mdp.r_max,
        )
    return r


def _draw_next_states(mdp: TabularMDP, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if len(s) == 0:
        return np.zeros(0, dtype=int)
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    return np.argmax(rng.random(len(s))[:, None] < cdf, axis=1)


def sample_offline_dataset(
    mdp_te: TabularMDP, mu: Occupancy, n: int, seed: int
) -> TransitionDataset:
    """n i.i.d. tuples with (s, a) ~ mu, r ~ R_te(s, a), s' ~ P_te(s, a)."""
    rng = np.random.default_rng(seed)
    cells = _sample_cells(mu.flat, n, rng)
    s, a = np.divmod(cells, mdp_te.n_actions)
    return TransitionDataset(
        s=s, a=a,
        r=_draw_rewards(mdp_te, s, a, rng),
        s_next=_draw_next_states(mdp_te, s, a, rng),
        seed=seed, source=DataSource.REAL_ENV,
        n_states=mdp_te.n_states, n_actions=mdp_te.n_actions,
        mdp_hash=mdp_hash(mdp_te),
    )


def sample_simulator_occupancy(
    mdp_tr: TabularMDP, pi: Policy, n: int, seed: int
) -> TransitionDataset:
    """n i.i.d. (s, a) ~ d^pi_tr with rewards from the shared reward model."""
    rng = np.random.default_rng(seed)
    d_tr = state_action_occupancy(mdp_tr, pi)
    cells = _sample_cells(d_tr.flat, n, rng)
    s, a = np.divmod(cells, mdp_tr.n_actions)
    return TransitionDataset(
        s=s, a=a,
        r=_draw_rewards(mdp_tr, s, a, rng),
        s_next=_draw_next_states(mdp_tr, s, a, rng),
        seed=seed, source=DataSource.SIMULATOR_OCCUPANCY,
        n_states=mdp_tr.n_states, n_actions=mdp_tr.n_actions,
        mdp_hash=mdp_hash(mdp_tr),
    )


def sample_initial_states(mdp: TabularMDP, n: int, seed: int) -> TransitionDataset:
    """n i.i.d. s ~ d0, stored with sentinel action / reward / next state."""
    rng = np.random.default_rng(seed)
    s = _sample_cells(mdp.initial_dist, n, rng)
    fill = np.full(n, SENTINEL, dtype=int)
    return TransitionDataset(
        s=s, a=fill, r=np.zeros(n), s_next=fill,
        seed=seed, source=DataSource.INITIAL_DIST,
        n_states=mdp.n_states, n_actions=mdp.n_actions,
        mdp_hash=mdp_hash(mdp),
    )


def save_dataset(ds: TransitionDataset, csv_path: str) -> None:
    """CSV with header s,a,r,s_next plus a JSON sidecar with the provenance."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "a", "r", "s_next"])
        for i in range(ds.n):
            writer.writerow([int(ds.s[i]), int(ds.a[i]), repr(float(ds.r[i])), int(ds.s_next[i])])
    sidecar = {
        "seed": ds.seed,
        "source": ds.source.value,
        "n": ds.n,
        "mdp_hash": ds.mdp_hash,
        "n_states": ds.n_states,
        "n_actions": ds.n_actions,
        "noise_kernel": NOISE_KERNEL,
    }
    with open(csv_path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_dataset(csv_path: str) -> TransitionDataset:
    with open(csv_path + ".json") as fh:
        sidecar = json.load(fh)
    s, a, r, s_next = [], [], [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            s.append(int(row["s"]))
            a.append(int(row["a"]))
            r.append(float(row["r"]))
            s_next.append(int(row["s_next"]))
    return TransitionDataset(
        s=np.array(s, dtype=int), a=np.array(a, dtype=int),
        r=np.array(r), s_next=np.array(s_next, dtype=int),
        seed=int(sidecar["seed"]), source=DataSource(sidecar["source"]),
        n_states=int(sidecar["n_states"]), n_actions=int(sidecar["n_actions"]),
        mdp_hash=sidecar.get("mdp_hash", ""),
    )
