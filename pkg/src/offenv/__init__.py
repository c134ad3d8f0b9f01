"""Off-environment policy evaluation from offline data plus an imperfect simulator.

The target-over-data importance weight d_te/mu is split into a directly
supervised factor beta = d_tr/mu and a near-unit correction w = d_te/d_tr;
each is estimated separately and recombined into a return estimate for the
target environment.
"""

from .mdp import (
    CoverageError,
    MDPValidationError,
    Occupancy,
    Policy,
    QTable,
    SingularSystemError,
    TabularMDP,
    WeightTables,
    bellman_flow_residual,
    default_horizon,
    exact_weight_tables,
    load_mdp,
    load_policy,
    mdp_hash,
    monte_carlo_occupancy,
    monte_carlo_return,
    policy_value,
    q_function,
    save_mdp,
    save_policy,
    state_action_occupancy,
    state_values,
)
from .models import FeatureMap, Kernel, WeightClass, WeightModel, median_bandwidth
from .envs import (
    DataSource,
    GridworldSpec,
    PolicyMixSpec,
    SourceMismatchError,
    TransitionDataset,
    build_gridworld,
    build_gridworld_pair,
    load_dataset,
    mix_policy,
    optimal_policy,
    sample_initial_states,
    sample_offline_dataset,
    sample_simulator_occupancy,
    save_dataset,
)
from .ratio import (
    PositiveFunctionClass,
    RatioFitConfig,
    fit_density_ratio,
    population_ratio_objective,
    sup_norm_error,
)
from .weights import (
    DivergenceError,
    MinimaxFitConfig,
    SingularSolveError,
    beta_gradient_dice_fit,
    beta_gradient_dice_fit_population,
    linear_weight_solve,
    linear_weight_solve_population,
    loss_Lw,
    loss_Lw_population,
    ope_estimate,
    ope_estimate_population,
    ope_estimate_reweighted,
    rkhs_inner_max,
    rkhs_inner_max_population,
    rkhs_weight_fit,
    rkhs_weight_fit_population,
)
from .qvalues import (
    linear_q_solve,
    linear_q_solve_population,
    loss_Lq,
    loss_Lq_population,
    ope_from_q,
    ope_from_q_population,
    rkhs_inner_max_w,
    rkhs_inner_max_w_population,
    rkhs_q_fit,
    rkhs_q_fit_population,
)
from .harness import (
    ExperimentConfig,
    ResultRow,
    baseline_simulator_only,
    baseline_vanilla_mis,
    gridworld_embedding,
    log10_mse_table,
    rate_fit,
    report_text,
    run_sweep,
    save_estimation_report,
    summarize,
)

__version__ = "0.1.0"
