"""Minimax weight estimation: loss, RKHS closed form, linear solve, DICE, OPE."""

import numpy as np
import pytest

from offenv import (
    DivergenceError,
    FeatureMap,
    Kernel,
    MinimaxFitConfig,
    SourceMismatchError,
    WeightClass,
    WeightModel,
    beta_gradient_dice_fit,
    beta_gradient_dice_fit_population,
    exact_weight_tables,
    linear_weight_solve,
    linear_weight_solve_population,
    loss_Lw,
    loss_Lw_population,
    ope_estimate,
    ope_estimate_population,
    ope_estimate_reweighted,
    policy_value,
    q_function,
    rkhs_inner_max,
    rkhs_inner_max_population,
    rkhs_weight_fit,
    rkhs_weight_fit_population,
    sample_initial_states,
    sample_offline_dataset,
    sample_simulator_occupancy,
    state_action_occupancy,
)

from conftest import random_pair, random_policy

GAMMA = 0.9


@pytest.fixture
def pair(rng):
    mdp_tr, mdp_te, pi, mu = random_pair(rng, 4, 2, gamma=GAMMA)
    tables = exact_weight_tables(mdp_te, mdp_tr, pi, mu)
    return mdp_tr, mdp_te, pi, mu, tables


@pytest.fixture
def datasets(rng, pair):
    mdp_tr, mdp_te, pi, mu, _ = pair
    real = sample_offline_dataset(mdp_te, mu, 2000, seed=5)
    sim = sample_simulator_occupancy(mdp_tr, pi, 2000, seed=6)
    d0 = sample_initial_states(mdp_te, 1000, seed=7)
    return real, sim, d0


def one_hot_kernel(s, a, bandwidth=1.0):
    return Kernel(embedding=FeatureMap.one_hot(s, a), bandwidth=bandwidth)


class TestLossLw:
    def test_zero_at_truth_for_any_q(self, rng, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        for _ in range(100):
            q = rng.uniform(0.0, 10.0, size=(4, 2))
            assert loss_Lw_population(t.w_star, t.beta_star, q, mdp_te, pi, mu) <= 1e-9

    def test_zero_q_gives_zero(self, rng, pair, datasets):
        _, _, pi, _, _ = pair
        real, _, d0 = datasets
        w = rng.uniform(0.0, 3.0, size=(4, 2))
        beta = rng.uniform(0.1, 3.0, size=(4, 2))
        assert loss_Lw(w, beta, np.zeros((4, 2)), real, d0, pi, GAMMA) == 0.0

    def test_unit_product_cancels_constants(self, rng, pair, datasets):
        _, _, pi, _, _ = pair
        real, _, d0 = datasets
        beta = rng.uniform(0.5, 2.0, size=(4, 2))
        w = 1.0 / beta
        assert loss_Lw(w, beta, np.ones((4, 2)), real, d0, pi, GAMMA) <= 1e-12

    def test_empirical_matches_manual_loop(self, pair, datasets):
        _, _, pi, _, t = pair
        real, _, d0 = datasets
        w, beta = t.w_star, t.beta_star
        q = np.linspace(0.0, 1.0, 8).reshape(4, 2)
        acc = 0.0
        for s, a, s2 in zip(real.s, real.a, real.s_next):
            q_next = float(pi.action_probs[s2] @ q[s2])
            acc += w[s, a] * beta[s, a] * (q[s, a] - GAMMA * q_next)
        acc /= real.n
        d0_term = np.mean([float(pi.action_probs[s] @ q[s]) for s in d0.s])
        expected = abs(acc - (1.0 - GAMMA) * d0_term)
        assert loss_Lw(w, beta, q, real, d0, pi, GAMMA) == pytest.approx(expected, abs=1e-12)

    def test_source_mismatch_raises(self, pair, datasets):
        _, _, pi, _, t = pair
        real, sim, d0 = datasets
        with pytest.raises(SourceMismatchError):
            loss_Lw(t.w_star, t.beta_star, np.ones((4, 2)), sim, d0, pi, GAMMA)
        with pytest.raises(SourceMismatchError):
            loss_Lw(t.w_star, t.beta_star, np.ones((4, 2)), real, real, pi, GAMMA)

    def test_nonzero_away_from_truth(self, rng, pair):
        # 50 random w != w*: some discriminator exposes each of them
        mdp_tr, mdp_te, pi, mu, t = pair
        for _ in range(50):
            w = rng.uniform(0.0, 3.0, size=(4, 2))
            if np.max(np.abs(w - t.w_star)) < 0.05:
                continue
            worst = max(loss_Lw_population(w, t.beta_star, rng.uniform(0, 5, (4, 2)),
                                           mdp_te, pi, mu) for _ in range(200))
            assert worst > 1e-6


class TestRkhsInnerMax:
    def test_population_zero_at_truth(self, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        val = rkhs_inner_max_population(t.w_star, t.beta_star, mdp_te, pi, mu,
                                        one_hot_kernel(4, 2))
        assert 0.0 <= val <= 1e-8

    def test_empty_data_gives_zero(self, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        real = sample_offline_dataset(mdp_te, mu, 0, seed=1)
        d0 = sample_initial_states(mdp_te, 0, seed=2)
        assert rkhs_inner_max(t.w_star, t.beta_star, real, d0, pi, GAMMA,
                              one_hot_kernel(4, 2)) == 0.0

    def test_dominates_unit_ball_discriminators(self, rng, pair, datasets):
        _, _, pi, _, _ = pair
        real, _, d0 = datasets
        kern = one_hot_kernel(4, 2)
        gram = kern.full_gram()
        w = rng.uniform(0.0, 3.0, size=(4, 2))
        beta = rng.uniform(0.2, 2.0, size=(4, 2))
        closed = rkhs_inner_max(w, beta, real, d0, pi, GAMMA, kern)
        for _ in range(200):
            coef = rng.normal(size=8)
            coef /= np.sqrt(coef @ gram @ coef)
            q = WeightModel("rkhs_coeffs", coef, 4, 2, kernel=kern,
                            anchors=np.arange(8), lo=-np.inf, hi=np.inf)
            assert loss_Lw(w, beta, q.values_table(), real, d0, pi, GAMMA) ** 2 <= closed + 1e-10


class TestLinearWeightSolve:
    def test_population_recovers_w_star(self, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        onehot = FeatureMap.one_hot(4, 2)
        w_hat = linear_weight_solve_population(onehot, onehot, t.beta_star, mdp_te, pi, mu,
                                               ridge_eps=0.0)
        assert np.max(np.abs(w_hat.values_table() - t.w_star)[t.support_mask]) <= 1e-6

    def test_identical_dynamics_unit_weight(self, rng):
        mdp_tr, _, pi, mu = random_pair(rng, 4, 2, gamma=GAMMA, eta=0.0)
        t = exact_weight_tables(mdp_tr, mdp_tr, pi, mu)
        onehot = FeatureMap.one_hot(4, 2)
        w_hat = linear_weight_solve_population(onehot, onehot, t.beta_star, mdp_tr, pi, mu,
                                               ridge_eps=0.0)
        assert np.max(np.abs(w_hat.values_table() - 1.0)[t.support_mask]) <= 1e-6

    def test_compensation_for_arbitrary_beta(self, rng, pair):
        # with one-hot features, the second stage absorbs any positive beta
        mdp_tr, mdp_te, pi, mu, t = pair
        onehot = FeatureMap.one_hot(4, 2)
        d_te = state_action_occupancy(mdp_te, pi).dist
        for _ in range(5):
            beta_tilde = rng.uniform(0.2, 5.0, size=(4, 2))
            w_hat = linear_weight_solve_population(onehot, onehot, beta_tilde, mdp_te, pi, mu,
                                                   ridge_eps=0.0)
            product = w_hat.values_table() * beta_tilde
            assert np.max(np.abs(product - d_te / mu.dist)) <= 1e-6

    def test_sampled_accuracy_median(self, rng, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        onehot = FeatureMap.one_hot(4, 2)
        errs = []
        for seed in range(10):
            real = sample_offline_dataset(mdp_te, mu, 50_000, seed=100 + seed)
            d0 = sample_initial_states(mdp_te, 50_000, seed=200 + seed)
            w_hat = linear_weight_solve(onehot, onehot, t.beta_star, real, d0, pi, GAMMA)
            errs.append(np.max(np.abs(w_hat.values_table() - t.w_star)[t.support_mask]))
        assert np.median(errs) <= 0.05

    def test_clamp_fraction_diagnostic(self, pair, datasets):
        _, _, pi, _, t = pair
        real, _, d0 = datasets
        onehot = FeatureMap.one_hot(4, 2)
        w_hat = linear_weight_solve(onehot, onehot, t.beta_star, real, d0, pi, GAMMA)
        assert 0.0 <= w_hat.diagnostics["clamp_fraction"] <= 1.0


class TestRkhsWeightFit:
    def test_starting_at_truth_returns_init(self, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        w_class = WeightClass("tabular", c_w=10.0, init_value=t.w_star)
        cfg = MinimaxFitConfig(learning_rate_w=0.1, max_iters=50)
        model = rkhs_weight_fit_population(w_class, t.beta_star, mdp_te, pi, mu,
                                           one_hot_kernel(4, 2), cfg)
        assert model.diagnostics["best_objective"] <= 1e-8
        assert model.diagnostics["best_iter"] == 0
        assert np.max(np.abs(model.values_table() - t.w_star)[t.support_mask]) <= 1e-6

    def test_identical_dynamics_fits_near_one(self, rng):
        mdp_tr, _, pi, mu = random_pair(rng, 4, 2, gamma=GAMMA, eta=0.0)
        t = exact_weight_tables(mdp_tr, mdp_tr, pi, mu)
        errs = []
        for seed in range(10):
            real = sample_offline_dataset(mdp_tr, mu, 20_000, seed=300 + seed)
            d0 = sample_initial_states(mdp_tr, 20_000, seed=400 + seed)
            cfg = MinimaxFitConfig(learning_rate_w=0.5, max_iters=2000)
            model = rkhs_weight_fit(WeightClass("tabular", c_w=10.0, init_value=1.0),
                                    t.beta_star, real, d0, pi, GAMMA,
                                    one_hot_kernel(4, 2), cfg)
            errs.append(np.max(np.abs(model.values_table() - 1.0)[t.support_mask]))
        assert np.median(errs) <= 0.1

    def test_best_objective_trace_nonincreasing(self, pair, datasets):
        _, _, pi, _, t = pair
        real, _, d0 = datasets
        cfg = MinimaxFitConfig(learning_rate_w=0.5, max_iters=300)
        model = rkhs_weight_fit(WeightClass("tabular", c_w=10.0, init_value=1.0),
                                t.beta_star, real, d0, pi, GAMMA, one_hot_kernel(4, 2), cfg)
        trace = np.asarray(model.diagnostics["trace"])
        best_so_far = np.minimum.accumulate(trace)
        assert np.all(np.diff(best_so_far) <= 1e-15)

    def test_linear_class_fit(self, pair, datasets):
        _, _, pi, _, t = pair
        real, _, d0 = datasets
        cfg = MinimaxFitConfig(learning_rate_w=0.5, max_iters=2000)
        model = rkhs_weight_fit(
            WeightClass("linear", features=FeatureMap.one_hot(4, 2), c_w=10.0, init_value=1.0),
            t.beta_star, real, d0, pi, GAMMA, one_hot_kernel(4, 2), cfg)
        assert model.kind == "linear"
        assert model.diagnostics["trace"][-1] <= model.diagnostics["trace"][0]


class TestGradientDice:
    def test_population_identical_dynamics_unit_tau(self, rng):
        mdp_tr, _, pi, mu = random_pair(rng, 3, 2, gamma=0.7, eta=0.0)
        t = exact_weight_tables(mdp_tr, mdp_tr, pi, mu)
        d_tr = state_action_occupancy(mdp_tr, pi)
        cfg = MinimaxFitConfig(learning_rate_w=0.1, learning_rate_inner=0.5, max_iters=10_000)
        tau = beta_gradient_dice_fit_population(
            WeightClass("tabular", c_w=100.0, init_value=1.0),
            WeightClass("tabular", c_w=100.0, init_value=0.0),
            t.beta_star, mdp_tr, pi, mu, d_tr, cfg)
        assert np.max(np.abs(tau.values_table() - 1.0)[t.support_mask]) <= 1e-2

    def test_population_recovers_w_star(self, rng):
        mdp_tr, mdp_te, pi, mu = random_pair(rng, 3, 2, gamma=0.7)
        t = exact_weight_tables(mdp_te, mdp_tr, pi, mu)
        d_tr = state_action_occupancy(mdp_tr, pi)
        cfg = MinimaxFitConfig(learning_rate_w=0.1, learning_rate_inner=0.5, max_iters=10_000)
        tau = beta_gradient_dice_fit_population(
            WeightClass("tabular", c_w=100.0, init_value=1.0),
            WeightClass("tabular", c_w=100.0, init_value=0.0),
            t.beta_star, mdp_te, pi, mu, d_tr, cfg)
        assert np.max(np.abs(tau.values_table() - t.w_star)[t.support_mask]) <= 1e-2

    def test_normalization_inactive_at_feasible_saddle(self, rng):
        # E_{d_tr}[w*] = 1, so the penalty vanishes at the saddle for any lambda
        mdp_tr, mdp_te, pi, mu = random_pair(rng, 3, 2, gamma=0.7)
        t = exact_weight_tables(mdp_te, mdp_tr, pi, mu)
        d_tr = state_action_occupancy(mdp_tr, pi)
        assert float(d_tr.flat @ t.w_star.reshape(-1)) == pytest.approx(1.0, abs=1e-12)
        results = []
        for lam in (0.0, 1.0):
            cfg = MinimaxFitConfig(learning_rate_w=0.1, learning_rate_inner=0.5,
                                   max_iters=10_000, gd_lambda=lam)
            tau = beta_gradient_dice_fit_population(
                WeightClass("tabular", c_w=100.0, init_value=1.0),
                WeightClass("tabular", c_w=100.0, init_value=0.0),
                t.beta_star, mdp_te, pi, mu, d_tr, cfg)
            results.append(tau.values_table())
        assert np.max(np.abs(results[0] - results[1])[t.support_mask]) <= 1e-2

    def test_empirical_fit_runs(self, pair, datasets):
        _, _, pi, _, t = pair
        real, sim, d0 = datasets
        cfg = MinimaxFitConfig(learning_rate_w=0.05, learning_rate_inner=0.5, max_iters=5000)
        tau = beta_gradient_dice_fit(
            WeightClass("tabular", c_w=50.0, init_value=1.0),
            WeightClass("tabular", c_w=50.0, init_value=0.0),
            t.beta_star, real, sim, d0, pi, GAMMA, cfg)
        assert tau.diagnostics["support_size"] > 0
        assert np.all(np.isfinite(tau.values()))

    def test_divergence_guard(self, pair, datasets):
        _, _, pi, _, t = pair
        real, sim, d0 = datasets
        cfg = MinimaxFitConfig(learning_rate_w=500.0, learning_rate_inner=500.0, max_iters=5000)
        with pytest.raises(DivergenceError):
            beta_gradient_dice_fit(
                WeightClass("tabular", c_w=1e9, init_value=1.0),
                WeightClass("tabular", c_w=1e9, init_value=0.0),
                t.beta_star, real, sim, d0, pi, GAMMA, cfg)


class TestOpeEstimate:
    def test_population_truth_recovers_j_te(self, pair):
        mdp_tr, mdp_te, pi, mu, t = pair
        d_tr = state_action_occupancy(mdp_tr, pi)
        j_hat = ope_estimate_population(t.w_star, d_tr, mdp_te.reward_mean)
        assert j_hat == pytest.approx(policy_value(mdp_te, pi), abs=1e-9)

    def test_unit_weight_identical_dynamics(self, rng):
        mdp_tr, _, pi, mu = random_pair(rng, 4, 2, gamma=GAMMA, eta=0.0)
        sim = sample_simulator_occupancy(mdp_tr, pi, 50_000, seed=4)
        j_hat = ope_estimate(np.ones((4, 2)), sim)
        assert j_hat == pytest.approx(policy_value(mdp_tr, pi), abs=0.02)

    def test_zero_reward_gives_zero(self, rng, pair):
        mdp_tr, _, pi, _, t = pair
        from offenv.mdp import TabularMDP
        zero = TabularMDP(mdp_tr.transition, np.zeros((4, 2)), mdp_tr.gamma,
                          mdp_tr.initial_dist, 1.0)
        sim = sample_simulator_occupancy(zero, pi, 1000, seed=8)
        assert ope_estimate(t.w_star, sim) == 0.0

    def test_source_mismatch(self, pair, datasets):
        _, _, _, _, t = pair
        real, _, _ = datasets
        with pytest.raises(SourceMismatchError):
            ope_estimate(t.w_star, real)

    def test_normalized_variant(self, pair, datasets):
        _, mdp_te, pi, _, t = pair
        _, sim, _ = datasets
        j_raw = ope_estimate(t.w_star, sim)
        j_norm = ope_estimate(t.w_star, sim, normalize=True)
        # E_{d_tr}[w*] = 1, so normalization is a small correction
        assert j_norm == pytest.approx(j_raw, rel=0.1)

    def test_reweighted_ablation_path(self, pair, datasets):
        mdp_tr, mdp_te, pi, mu, t = pair
        real, _, _ = datasets
        j_hat = ope_estimate_reweighted(t.w_star, t.beta_star, real)
        assert j_hat == pytest.approx(policy_value(mdp_te, pi), abs=0.05)
