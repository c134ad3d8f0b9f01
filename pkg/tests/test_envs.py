"""Gridworld pairs, policy mixing, and seeded dataset construction."""

import numpy as np
import pytest

from offenv import (
    DataSource,
    GridworldSpec,
    MDPValidationError,
    Policy,
    PolicyMixSpec,
    build_gridworld,
    build_gridworld_pair,
    load_dataset,
    mix_policy,
    optimal_policy,
    policy_value,
    sample_initial_states,
    sample_offline_dataset,
    sample_simulator_occupancy,
    save_dataset,
    state_action_occupancy,
)
from offenv.mdp import Occupancy, TabularMDP

from conftest import random_mdp, random_policy

SPEC = GridworldSpec(width=4, height=4, goal=(3, 3), step_reward=0.3, goal_reward=0.7, gamma=0.9)


class TestGridworld:
    def test_equal_eps_identical(self):
        tr, te = build_gridworld_pair(SPEC, 0.2, 0.2)
        assert np.array_equal(tr.transition, te.transition)
        assert np.array_equal(tr.reward_mean, te.reward_mean)

    def test_zero_eps_deterministic(self):
        mdp = build_gridworld(SPEC, 0.0)
        assert np.all(np.isin(mdp.transition, (0.0, 1.0)))

    def test_pair_differs_only_in_dynamics(self):
        tr, te = build_gridworld_pair(SPEC, 0.0, 0.1)
        assert not np.array_equal(tr.transition, te.transition)
        assert np.array_equal(tr.reward_mean, te.reward_mean)
        assert np.array_equal(tr.initial_dist, te.initial_dist)

    def test_gap_positive_for_greedy(self):
        tr, te = build_gridworld_pair(SPEC, 0.0, 0.1)
        greedy = optimal_policy(tr)
        assert abs(policy_value(tr, greedy) - policy_value(te, greedy)) > 0.0

    def test_gap_monotone_in_eps(self):
        tr = build_gridworld(SPEC, 0.0)
        greedy = optimal_policy(tr)
        j_tr = policy_value(tr, greedy)
        gaps = [abs(j_tr - policy_value(build_gridworld(SPEC, eps), greedy))
                for eps in (0.1, 0.2, 0.3)]
        assert gaps[0] <= gaps[1] <= gaps[2]

    def test_goal_is_absorbing(self):
        mdp = build_gridworld(SPEC, 0.3)
        goal = SPEC.cell_index(*SPEC.goal)
        assert np.allclose(mdp.transition[goal, :, goal], 1.0)

    def test_goal_outside_grid_rejected(self):
        with pytest.raises(MDPValidationError):
            GridworldSpec(width=3, height=3, goal=(3, 0))

    def test_eps_out_of_range_rejected(self):
        with pytest.raises(MDPValidationError):
            GridworldSpec(width=3, height=3, goal=(0, 0), noise_eps=1.5)


class TestPolicyMixing:
    def test_rate_zero_keeps_base(self, rng):
        base = random_policy(rng, 5, 3)
        assert np.array_equal(mix_policy(base, 0.0).action_probs, base.action_probs)

    def test_rate_one_is_uniform(self, rng):
        mixed = mix_policy(random_policy(rng, 5, 3), 1.0)
        assert np.allclose(mixed.action_probs, 1.0 / 3.0)

    def test_half_rate_arithmetic(self):
        base = Policy(np.array([[1.0, 0.0]]))
        mixed = mix_policy(base, 0.5)
        assert mixed.action_probs[0] == pytest.approx([0.75, 0.25])

    def test_mix_spec_wrapper(self, rng):
        spec = PolicyMixSpec(base_policy=random_policy(rng, 3, 2), mix_rate=0.3)
        assert np.allclose(spec.mixed().action_probs.sum(axis=1), 1.0)

    def test_optimal_policy_improves_on_random(self, rng):
        for _ in range(5):
            mdp = random_mdp(rng, 5, 3, gamma=0.9)
            opt = optimal_policy(mdp)
            assert policy_value(mdp, opt) >= policy_value(mdp, random_policy(rng, 5, 3)) - 1e-10


class TestDatasets:
    def setup_method(self):
        self.mdp = build_gridworld(SPEC, 0.1)
        self.pi = mix_policy(optimal_policy(build_gridworld(SPEC, 0.0)), 0.2)
        self.mu = state_action_occupancy(self.mdp, self.pi)

    def test_empty_dataset(self):
        ds = sample_offline_dataset(self.mdp, self.mu, 0, seed=1)
        assert ds.n == 0

    def test_point_mass_mu_identical_tuples(self):
        # deterministic dynamics + point-mass mu: every tuple is the same
        det = build_gridworld(SPEC, 0.0)
        table = np.zeros((det.n_states, det.n_actions))
        table[0, 1] = 1.0
        ds = sample_offline_dataset(det, Occupancy(table), 50, seed=2)
        assert len(set(zip(ds.s, ds.a, ds.r, ds.s_next))) == 1

    def test_offline_frequencies_match_mu(self):
        ds = sample_offline_dataset(self.mdp, self.mu, 100_000, seed=3)
        freq = np.bincount(ds.flat_cells, minlength=64) / ds.n
        assert 0.5 * np.abs(freq - self.mu.flat).sum() <= 0.02

    def test_simulator_frequencies_match_occupancy(self):
        d_tr = state_action_occupancy(self.mdp, self.pi)
        ds = sample_simulator_occupancy(self.mdp, self.pi, 100_000, seed=4)
        freq = np.bincount(ds.flat_cells, minlength=64) / ds.n
        assert 0.5 * np.abs(freq - d_tr.flat).sum() <= 0.02

    def test_initial_state_frequencies(self):
        ds = sample_initial_states(self.mdp, 100_000, seed=5)
        freq = np.bincount(ds.s, minlength=16) / ds.n
        assert 0.5 * np.abs(freq - self.mdp.initial_dist).sum() <= 0.02
        assert np.all(ds.a == -1)

    def test_point_mass_d0(self):
        mdp = TabularMDP(self.mdp.transition, self.mdp.reward_mean, self.mdp.gamma,
                         np.eye(16)[5], self.mdp.r_max)
        ds = sample_initial_states(mdp, 10, seed=6)
        assert np.all(ds.s == 5)

    def test_seed_determinism(self):
        a = sample_offline_dataset(self.mdp, self.mu, 1000, seed=7)
        b = sample_offline_dataset(self.mdp, self.mu, 1000, seed=7)
        assert np.array_equal(a.s, b.s) and np.array_equal(a.a, b.a)
        assert np.array_equal(a.r, b.r) and np.array_equal(a.s_next, b.s_next)

    def test_samples_stay_on_support(self):
        ds = sample_offline_dataset(self.mdp, self.mu, 20_000, seed=8)
        assert np.all(self.mu.flat[ds.flat_cells] > 0)

    def test_rewards_within_bounds_under_noise(self):
        noisy = TabularMDP(self.mdp.transition, self.mdp.reward_mean, self.mdp.gamma,
                           self.mdp.initial_dist, self.mdp.r_max, reward_noise_halfwidth=0.3)
        ds = sample_offline_dataset(noisy, self.mu, 5_000, seed=9)
        assert ds.r.min() >= 0.0 and ds.r.max() <= noisy.r_max
        assert ds.r.std() > 0.05

    def test_csv_roundtrip(self, tmp_path):
        ds = sample_offline_dataset(self.mdp, self.mu, 200, seed=10)
        path = str(tmp_path / "data.csv")
        save_dataset(ds, path)
        again = load_dataset(path)
        assert again.source == DataSource.REAL_ENV
        assert again.seed == ds.seed and again.mdp_hash == ds.mdp_hash
        assert np.array_equal(again.s, ds.s) and np.allclose(again.r, ds.r)

    def test_sidecar_records_noise_kernel(self, tmp_path):
        ds = sample_initial_states(self.mdp, 5, seed=11)
        path = str(tmp_path / "d0.csv")
        save_dataset(ds, path)
        import json
        sidecar = json.loads((tmp_path / "d0.csv.json").read_text())
        assert sidecar["noise_kernel"] == "uniform_neighbor_moves"
        assert sidecar["source"] == "initial_dist"
        assert sidecar["n"] == 5
