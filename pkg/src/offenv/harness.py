"""Experiment orchestration: estimator sweeps over (eps, delta, alpha, n, seed).

Each sweep cell builds a simulator / real-environment pair, mixes behavior
and target policies out of the simulator-optimal one, draws the offline and
simulator datasets, fits the supervised ratio once, and then runs every
requested estimator.  Rows carry exact target returns, so the tables report
true errors.  Cell failures become rows with an error tag instead of
aborting the sweep.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs import (
    GridworldSpec,
    build_gridworld_pair,
    mix_policy,
    optimal_policy,
    sample_initial_states,
    sample_offline_dataset,
    sample_simulator_occupancy,
)
from .mdp import MDPValidationError, Occupancy, Policy, TabularMDP, policy_value, state_action_occupancy
from .models import FeatureMap, Kernel, WeightClass, median_bandwidth
from .qvalues import linear_q_solve, ope_from_q
from .ratio import PositiveFunctionClass, RatioFitConfig, fit_density_ratio
from .weights import (
    MinimaxFitConfig,
    beta_gradient_dice_fit,
    linear_weight_solve,
    ope_estimate,
    ope_estimate_reweighted,
    rkhs_weight_fit,
)

ESTIMATORS = (
    "beta_dice_linear",
    "beta_dice_rkhs",
    "beta_gradient_dice",
    "q_route",
    "simulator_only",
    "vanilla_mis",
    "oracle",
)

# The simulator is free to query, so its occupancy samples outnumber the
# offline dataset by this factor.
SIM_SAMPLE_MULTIPLIER = 10

# Ratio fits in the pipeline run unregularized: any shrinkage of beta away
# from the empirical count ratio breaks the two-stage compensation identity
# and is amplified by the near-singular flow system downstream.
PIPELINE_RATIO_CFG = RatioFitConfig(reg_lambda=0.0, learning_rate=0.5, max_iters=2000, tol=1e-13)
PIPELINE_DICE_CFG = MinimaxFitConfig(
    learning_rate_w=0.05, learning_rate_inner=0.5, max_iters=20000, gd_lambda=1.0
)
PIPELINE_RKHS_CFG = MinimaxFitConfig(learning_rate_w=0.5, learning_rate_inner=0.5, max_iters=2000)
WEIGHT_CLAMP = 50.0


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridworldSpec
    eps_sim: float
    eps_real_list: tuple[float, ...]
    delta_list: tuple[float, ...]
    alpha_list: tuple[float, ...]
    n_list: tuple[int, ...]
    seeds: tuple[int, ...]
    estimators: tuple[str, ...]
    output_dir: str = "out"
    reward_noise_halfwidth: float = 0.3

    def __post_init__(self):
        for name in ("eps_real_list", "delta_list", "alpha_list", "n_list", "seeds", "estimators"):
            if len(getattr(self, name)) == 0:
                raise MDPValidationError(f"config field {name} must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise MDPValidationError("seeds must be distinct")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise MDPValidationError(f"unknown estimators {unknown}; choose from {list(ESTIMATORS)}")

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "eps_sim": self.eps_sim,
            "eps_real_list": list(self.eps_real_list),
            "delta_list": list(self.delta_list),
            "alpha_list": list(self.alpha_list),
            "n_list": list(self.n_list),
            "seeds": list(self.seeds),
            "estimators": list(self.estimators),
            "output_dir": self.output_dir,
            "reward_noise_halfwidth": self.reward_noise_halfwidth,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        try:
            return ExperimentConfig(
                grid=GridworldSpec.from_dict(doc["grid"]),
                eps_sim=float(doc["eps_sim"]),
                eps_real_list=tuple(float(x) for x in doc["eps_real_list"]),
                delta_list=tuple(float(x) for x in doc["delta_list"]),
                alpha_list=tuple(float(x) for x in doc["alpha_list"]),
                n_list=tuple(int(x) for x in doc["n_list"]),
                seeds=tuple(int(x) for x in doc["seeds"]),
                estimators=tuple(doc["estimators"]),
                output_dir=str(doc.get("output_dir", "out")),
                reward_noise_halfwidth=float(doc.get("reward_noise_halfwidth", 0.3)),
            )
        except KeyError as exc:
            raise MDPValidationError(f"config missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class ResultRow:
    estimator: str
    eps_real: float
    delta: float
    alpha: float
    n: int
    seed: int
    j_hat: float
    j_te_exact: float
    abs_err: float
    sq_err: float
    error: str = ""

    @staticmethod
    def make(estimator, eps_real, delta, alpha, n, seed, j_hat, j_te) -> "ResultRow":
        err = abs(j_hat - j_te)
        return ResultRow(estimator, eps_real, delta, alpha, n, seed, j_hat, j_te, err, err * err)

    @staticmethod
    def failed(estimator, eps_real, delta, alpha, n, seed, j_te, message) -> "ResultRow":
        return ResultRow(estimator, eps_real, delta, alpha, n, seed,
                         math.nan, j_te, math.nan, math.nan, error=message)


def _with_reward_noise(mdp: TabularMDP, halfwidth: float) -> TabularMDP:
    if halfwidth == 0.0:
        return mdp
    return TabularMDP(mdp.transition, mdp.reward_mean, mdp.gamma, mdp.initial_dist,
                      mdp.r_max, reward_noise_halfwidth=halfwidth)


def gridworld_embedding(spec: GridworldSpec) -> FeatureMap:
    """Embed (s, a) as (col, row, move direction), normalized to the unit box."""
    moves = ((-1, 0), (0, 1), (1, 0), (0, -1))
    rows = []
    for s in range(spec.n_states):
        r, c = divmod(s, spec.width)
        for dr, dc in moves:
            rows.append([
                c / max(spec.width - 1, 1),
                r / max(spec.height - 1, 1),
                dc, dr,
            ])
    return FeatureMap.from_table(np.asarray(rows, dtype=float))


def baseline_simulator_only(mdp_tr: TabularMDP, pi: Policy) -> float:
    """Trust the simulator: exact J under the simulator dynamics."""
    return policy_value(mdp_tr, pi)


def baseline_vanilla_mis(real_data, d0_data, pi: Policy, gamma: float,
                         phi: FeatureMap, psi: FeatureMap,
                         ridge_eps: float = 1e-8) -> float:
    """Single-ratio MIS: learn d_te/mu with the same loss machinery (beta == 1)
    and average the real-environment rewards under it."""
    s, a = real_data.n_states, real_data.n_actions
    ones = np.ones((s, a))
    w_hat = linear_weight_solve(phi, psi, ones, real_data, d0_data, pi, gamma, ridge_eps)
    return ope_estimate_reweighted(w_hat, ones, real_data)


@dataclass
class _CellContext:
    """Everything shared by estimators within one sweep cell."""

    mdp_tr: TabularMDP
    mdp_te: TabularMDP
    target: Policy
    mu: Occupancy
    j_te: float
    j_tr: float
    gamma: float
    real_data: object = None
    sim_data: object = None
    d0_data: object = None
    beta_hat: object = None
    kernel: Kernel | None = None


def _derive_seeds(seed: int, cell_index: int, count: int = 3) -> list[int]:
    ss = np.random.SeedSequence([int(seed), int(cell_index)])
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


def _run_estimator(name: str, ctx: _CellContext, onehot: FeatureMap) -> float:
    c_q = ctx.mdp_te.r_max / (1.0 - ctx.gamma)
    if name == "oracle":
        return ctx.j_te
    if name == "simulator_only":
        return ctx.j_tr
    if name == "vanilla_mis":
        return baseline_vanilla_mis(ctx.real_data, ctx.d0_data, ctx.target, ctx.gamma, onehot, onehot)
    if name == "beta_dice_linear":
        w_hat = linear_weight_solve(onehot, onehot, ctx.beta_hat, ctx.real_data, ctx.d0_data,
                                    ctx.target, ctx.gamma, c_w=WEIGHT_CLAMP)
        return ope_estimate(w_hat, ctx.sim_data)
    if name == "beta_dice_rkhs":
        w_class = WeightClass("tabular", c_w=WEIGHT_CLAMP, init_value=1.0)
        w_hat = rkhs_weight_fit(w_class, ctx.beta_hat, ctx.real_data, ctx.d0_data,
                                ctx.target, ctx.gamma, ctx.kernel, PIPELINE_RKHS_CFG)
        return ope_estimate(w_hat, ctx.sim_data)
    if name == "beta_gradient_dice":
        tau_class = WeightClass("tabular", c_w=WEIGHT_CLAMP, init_value=1.0)
        f_class = WeightClass("tabular", c_w=WEIGHT_CLAMP, init_value=0.0)
        tau = beta_gradient_dice_fit(tau_class, f_class, ctx.beta_hat, ctx.real_data,
                                     ctx.sim_data, ctx.d0_data, ctx.target, ctx.gamma,
                                     PIPELINE_DICE_CFG)
        return ope_estimate(tau, ctx.sim_data)
    if name == "q_route":
        q_hat = linear_q_solve(onehot, onehot, ctx.beta_hat, ctx.real_data, ctx.sim_data,
                               ctx.target, ctx.gamma, c_q=c_q)
        return ope_from_q(q_hat, ctx.d0_data, ctx.target, ctx.gamma)
    raise MDPValidationError(f"unknown estimator {name!r}")


def _run_cell(cfg: ExperimentConfig, eps_real: float, delta: float, alpha: float,
              n: int, seed: int, cell_index: int) -> list[ResultRow]:
    mdp_tr, mdp_te = build_gridworld_pair(cfg.grid, cfg.eps_sim, eps_real)
    mdp_tr = _with_reward_noise(mdp_tr, cfg.reward_noise_halfwidth)
    mdp_te = _with_reward_noise(mdp_te, cfg.reward_noise_halfwidth)
    base = optimal_policy(mdp_tr)
    behavior = mix_policy(base, delta)
    target = mix_policy(base, alpha)
    mu = state_action_occupancy(mdp_te, behavior)
    ctx = _CellContext(
        mdp_tr=mdp_tr, mdp_te=mdp_te, target=target, mu=mu,
        j_te=policy_value(mdp_te, target), j_tr=policy_value(mdp_tr, target),
        gamma=cfg.grid.gamma,
    )
    onehot = FeatureMap.one_hot(mdp_te.n_states, mdp_te.n_actions)

    rows = []
    needs_data = [e for e in cfg.estimators if e not in ("oracle", "simulator_only")]
    if needs_data:
        try:
            s_real, s_sim, s_d0 = _derive_seeds(seed, cell_index)
            ctx.real_data = sample_offline_dataset(mdp_te, mu, n, s_real)
            ctx.sim_data = sample_simulator_occupancy(mdp_tr, target, SIM_SAMPLE_MULTIPLIER * n, s_sim)
            ctx.d0_data = sample_initial_states(mdp_te, n, s_d0)
            ctx.beta_hat = fit_density_ratio(ctx.sim_data, ctx.real_data,
                                             PositiveFunctionClass("tabular_exp"),
                                             PIPELINE_RATIO_CFG)
            embedding = gridworld_embedding(cfg.grid)
            ctx.kernel = Kernel(embedding=embedding, bandwidth=median_bandwidth(embedding))
        except Exception as exc:  # noqa: BLE001 - cell failures are data
            for name in cfg.estimators:
                rows.append(ResultRow.failed(name, eps_real, delta, alpha, n, seed, ctx.j_te,
                                             f"{type(exc).__name__}: {exc}"))
            return rows

    for name in cfg.estimators:
        try:
            j_hat = _run_estimator(name, ctx, onehot)
            rows.append(ResultRow.make(name, eps_real, delta, alpha, n, seed, j_hat, ctx.j_te))
        except Exception as exc:  # noqa: BLE001
            rows.append(ResultRow.failed(name, eps_real, delta, alpha, n, seed, ctx.j_te,
                                         f"{type(exc).__name__}: {exc}"))
    return rows


def _cell_args(cfg: ExperimentConfig):
    index = 0
    for eps_real in cfg.eps_real_list:
        for delta in cfg.delta_list:
            for alpha in cfg.alpha_list:
                for n in cfg.n_list:
                    for seed in cfg.seeds:
                        yield (cfg, eps_real, delta, alpha, n, seed, index)
                        index += 1


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[ResultRow]:
    """Run every (eps_real, delta, alpha, n, seed) cell for every estimator.

    Cells are independent; their RNG streams derive from (seed, cell index),
    so the output is identical regardless of `jobs`.
    """
    args = list(_cell_args(cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_cell_star, args))
    else:
        chunks = [_run_cell(*a) for a in args]
    return [row for chunk in chunks for row in chunk]


def _run_cell_star(args):
    return _run_cell(*args)


# ---------------------------------------------------------------------------
# Tables, rate fits, serialization
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("estimator", "eps_real", "delta", "alpha", "n", "seed",
               "j_hat", "j_te_exact", "abs_err", "sq_err", "error")


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([
            r.estimator, repr(r.eps_real), repr(r.delta), repr(r.alpha), r.n, r.seed,
            repr(r.j_hat), repr(r.j_te_exact), repr(r.abs_err), repr(r.sq_err), r.error,
        ])
    return buf.getvalue()


def save_rows(rows: list[ResultRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows))


def load_rows(path: str) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ResultRow(
                estimator=rec["estimator"], eps_real=float(rec["eps_real"]),
                delta=float(rec["delta"]), alpha=float(rec["alpha"]),
                n=int(rec["n"]), seed=int(rec["seed"]),
                j_hat=float(rec["j_hat"]), j_te_exact=float(rec["j_te_exact"]),
                abs_err=float(rec["abs_err"]), sq_err=float(rec["sq_err"]),
                error=rec.get("error", ""),
            ))
    return rows


def log10_mse_table(rows: list[ResultRow]) -> dict:
    """log10 of the mean squared error per estimator, per sweep cell and overall.

    All-zero errors produce -inf, rendered as "-inf" downstream.  Error rows
    are excluded from the averages and counted separately.
    """
    per_cell: dict = {}
    overall: dict = {}
    failures: dict = {}
    for r in rows:
        if r.error:
            failures[r.estimator] = failures.get(r.estimator, 0) + 1
            continue
        cell = (r.eps_real, r.delta, r.alpha, r.n)
        per_cell.setdefault(r.estimator, {}).setdefault(cell, []).append(r.sq_err)
        overall.setdefault(r.estimator, []).append(r.sq_err)

    def log10_mean(vals):
        m = float(np.mean(vals))
        return -math.inf if m == 0.0 else float(np.log10(m))

    return {
        "per_cell": {est: {cell: log10_mean(v) for cell, v in cells.items()}
                     for est, cells in per_cell.items()},
        "overall": {est: log10_mean(v) for est, v in overall.items()},
        "failures": failures,
    }


def rate_fit(rows: list[ResultRow], estimator: str) -> float:
    """Least-squares slope of log10(median abs_err) against log10(n)."""
    by_n: dict[int, list[float]] = {}
    for r in rows:
        if r.estimator == estimator and not r.error:
            by_n.setdefault(r.n, []).append(r.abs_err)
    if len(by_n) < 2:
        raise MDPValidationError(f"rate fit for {estimator!r} needs at least two n values")
    ns = sorted(by_n)
    medians = [float(np.median(by_n[n])) for n in ns]
    if any(m == 0.0 for m in medians):
        raise MDPValidationError("rate fit undefined: a median error is exactly zero")
    return float(np.polyfit(np.log10(ns), np.log10(medians), 1)[0])


def _fmt(val: float) -> str:
    if val == -math.inf:
        return "-inf"
    return f"{val:.4f}"


def summarize(rows: list[ResultRow]) -> dict:
    table = log10_mse_table(rows)
    estimators = sorted(table["overall"])
    slopes = {}
    for est in estimators:
        if est in ("oracle", "simulator_only"):
            continue
        try:
            slopes[est] = rate_fit(rows, est)
        except MDPValidationError:
            pass
    return {
        "n_rows": len(rows),
        "log10_mse_overall": {e: _fmt(v) for e, v in table["overall"].items()},
        "rate_slopes": {e: f"{v:.4f}" for e, v in slopes.items()},
        "failures": table["failures"],
    }


def report_text(rows: list[ResultRow]) -> str:
    """Human-readable log10-MSE table plus rate slopes."""
    table = log10_mse_table(rows)
    lines = ["log10 mean squared error by estimator and cell",
             f"{'estimator':<20} {'eps':>5} {'delta':>6} {'alpha':>6} {'n':>7}  log10(MSE)"]
    for est in sorted(table["per_cell"]):
        for cell in sorted(table["per_cell"][est]):
            eps, delta, alpha, n = cell
            lines.append(f"{est:<20} {eps:>5.2f} {delta:>6.2f} {alpha:>6.2f} {n:>7d}  "
                         f"{_fmt(table['per_cell'][est][cell])}")
    lines.append("")
    lines.append("overall log10(MSE):")
    for est in sorted(table["overall"]):
        lines.append(f"  {est:<20} {_fmt(table['overall'][est])}")
    summary = summarize(rows)
    if summary["rate_slopes"]:
        lines.append("")
        lines.append("rate slopes (log10 median |err| vs log10 n):")
        for est, slope in sorted(summary["rate_slopes"].items()):
            lines.append(f"  {est:<20} {slope}")
    if summary["failures"]:
        lines.append("")
        lines.append(f"failed rows: {summary['failures']}")
    return "\n".join(lines) + "\n"


def report_csv(rows: list[ResultRow]) -> str:
    table = log10_mse_table(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["estimator", "eps_real", "delta", "alpha", "n", "log10_mse"])
    for est in sorted(table["per_cell"]):
        for cell in sorted(table["per_cell"][est]):
            writer.writerow([est, *[repr(c) for c in cell[:3]], cell[3],
                             _fmt(table["per_cell"][est][cell])])
    return buf.getvalue()


def save_estimation_report(path: str, estimator: str, n: int, seed: int, j_hat: float,
                           j_te_exact: float | None = None,
                           loss_trace: list[float] | None = None,
                           extra: dict | None = None) -> None:
    """Single-estimate report; the loss trace goes to a sibling CSV."""
    trace_path = None
    if loss_trace is not None:
        trace_path = os.path.splitext(path)[0] + "_trace.csv"
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "objective"])
            for i, val in enumerate(loss_trace):
                writer.writerow([i, repr(float(val))])
    doc = {
        "estimator": estimator, "n": n, "seed": seed, "j_hat": j_hat,
        "j_te_exact": j_te_exact,
        "loss_trace_path": os.path.basename(trace_path) if trace_path else None,
    }
    if estimator == "q_route":
        # The q-route bound needs the true correction inside conv(W); with the
        # tabular/one-hot classes used here that holds by construction.
        doc["w_class_realizable"] = True
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
