"""Minimal-energy replication of random targets by controlled linear ODEs."""

from .mathcore import QuadratureSpec, SingularityError, QuadratureError, mat_exp, phi1, solve_spd, integrate_singular
from .weights import PenaltyWeight, make_weight
from .sde import TimeGrid, build_grid, concat_grids, PathEnsemble, sample_ensemble, Market, simulate_gbm
from .kernels import (
    Deterministic, LinearWiener, GBMTerminal, EuropeanCall, AsianAverage, LognormalIncrement,
    bs_price_delta, payoff_mean, kernel_eval, validate_kf, regression_check,
)
from .replicator import (
    SystemSpec, make_system, RiccatiWeights, riccati_build, dual_init, simulate_dual, control_at,
    controls, integrate_state, integrate_dual_state, cost, dual_cost, min_cost_closed_form,
    ReplicationRun, replicate, lagrangian, admissibility_report, perturbation_optimality, saddle_check,
)
from .oracle import (
    RankDeficientError, build_lattice, make_problem, solve_constrained_lq, solve_soft_penalty,
    oracle_vs_formula,
)
from .finance import cash_plan, dividend_plan, make_bond_spec, bond_grid, bond_curve

__version__ = "0.1.0"
