"""Federated bilevel optimization simulator.

Library + CLI implementing a deterministic federated bilevel algorithm, its
momentum-accelerated stochastic variant, and an averaging baseline, with a
Neumann-series stochastic hypergradient estimator, closed-form quadratic
verification instances, and a group-fair federated learning application.
"""

__version__ = "0.1.0"

from .fedengine import ClientState, RunConfig, RunResult, alpha_schedule, communicate, run
from .hypergrad import (
    LinearSolveConfig,
    NeumannConfig,
    neumann_inverse_apply,
    phi_exact,
    phi_stochastic,
)
from .numerics import RngStream, l2_norm_sq, mean_of_vectors, scale_add, simplex_project
from .oracle import BilevelOracle, Minibatch, OracleConstants, SingleLevelOracle

__all__ = [
    "BilevelOracle",
    "ClientState",
    "LinearSolveConfig",
    "Minibatch",
    "NeumannConfig",
    "OracleConstants",
    "RngStream",
    "RunConfig",
    "RunResult",
    "SingleLevelOracle",
    "alpha_schedule",
    "communicate",
    "l2_norm_sq",
    "mean_of_vectors",
    "neumann_inverse_apply",
    "phi_exact",
    "phi_stochastic",
    "run",
    "scale_add",
    "simplex_project",
    "__version__",
]
