"""Optimal stopping of piecewise deterministic Markov processes by quantization."""

from .bounds import compute_bounds, derive_constants, lipschitz_ledger, stopping_bound, value_error_bound
from .dp import backward_solve, build_time_grid, continuous_oracle, op_J_hat, op_K_hat, op_L_hat
from .estimator import QuantizedStoppingSolver
from .exceptions import (
    AbsentRowError,
    ConfigError,
    DomainError,
    GridFileError,
    SchemaVersionError,
    UnsupportedModelError,
)
from .model import ModelConstants, PdmpModel, cumulative_hazard, make_example_model, sample_interjump
from .policy import apply_rule, build_policy, choose_beta, evaluate_rule, r_threshold, run_rule
from .quantization import (
    ChainQuantizer,
    QuantizationGridSet,
    estimate_errors,
    estimate_transition_weights,
    load_grids,
    project,
    save_grids,
    train_grids,
)
from .simulation import simulate_chain, simulate_chains, simulate_chains_streamed, sup_reward_along_path

__version__ = "0.1.0"

__all__ = [
    "AbsentRowError",
    "ChainQuantizer",
    "ConfigError",
    "DomainError",
    "GridFileError",
    "ModelConstants",
    "PdmpModel",
    "QuantizationGridSet",
    "QuantizedStoppingSolver",
    "SchemaVersionError",
    "UnsupportedModelError",
    "apply_rule",
    "backward_solve",
    "build_policy",
    "build_time_grid",
    "choose_beta",
    "compute_bounds",
    "continuous_oracle",
    "cumulative_hazard",
    "derive_constants",
    "estimate_errors",
    "estimate_transition_weights",
    "evaluate_rule",
    "lipschitz_ledger",
    "load_grids",
    "make_example_model",
    "op_J_hat",
    "op_K_hat",
    "op_L_hat",
    "project",
    "r_threshold",
    "run_rule",
    "sample_interjump",
    "save_grids",
    "simulate_chain",
    "simulate_chains",
    "simulate_chains_streamed",
    "stopping_bound",
    "sup_reward_along_path",
    "value_error_bound",
    "train_grids",
]
