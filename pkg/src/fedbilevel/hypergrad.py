"""Hypergradient computation.

Two routes to the same quantity:

* ``phi_exact`` solves the inner-Hessian linear system with matrix-free
  conjugate gradients and is accurate to the solver tolerance. It is the
  reference the stochastic route is validated against.
* ``phi_stochastic`` estimates the Hessian inverse with a truncated
  geometric (Neumann) series over independent Hessian minibatches, the
  cheap estimator used inside the federated algorithms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import RngStream, Vector, l2_norm_sq
from .oracle import FULL_F, FULL_G, FULL_HESSIAN, BilevelOracle, Minibatch


class LinearSolveError(RuntimeError):
    """CG failed to reach tolerance; carries the final residual norm."""

    def __init__(self, residual: float, max_iter: int):
        self.residual = residual
        self.max_iter = max_iter
        super().__init__(
            f"conjugate gradients did not converge within {max_iter} iterations "
            f"(final residual {residual:.3e}); the inner Hessian may violate the "
            f"declared strong convexity"
        )


@dataclass(frozen=True)
class LinearSolveConfig:
    tol: float = 1e-10
    max_iter: Optional[int] = None  # None -> 10 * dim_y

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class NeumannConfig:
    """Controls the truncated-series inverse-Hessian estimator.

    eta is the series step, q_terms the truncation order Q (0 keeps only
    the identity term), and the batch sizes govern the three kinds of
    stochastic queries (0 = full batch). When the smoothness of g is
    declared, eta must satisfy eta * declared_smoothness < 1, the
    convergence condition of the series.
    """

    eta: float
    q_terms: int
    batch_f: int = 0
    batch_g: int = 0
    batch_hess: int = 0
    declared_smoothness: Optional[float] = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.q_terms < 0:
            raise ValueError(f"q_terms must be >= 0, got {self.q_terms}")
        for name in ("batch_f", "batch_g", "batch_hess"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.declared_smoothness is not None and self.eta * self.declared_smoothness >= 1:
            raise ValueError(
                f"eta = {self.eta} too large for declared smoothness "
                f"{self.declared_smoothness}: need eta * L < 1"
            )


def cg_solve(apply_matrix, rhs: Vector, tol: float, max_iter: int) -> Vector:
    """Solve A z = rhs for symmetric positive definite A given z -> A z.

    Terminates when the residual norm drops below tol * ||rhs||; raises
    LinearSolveError otherwise.
    """
    target = tol * np.sqrt(l2_norm_sq(rhs))
    z = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = l2_norm_sq(r)
    if np.sqrt(rs) <= target:
        return z
    for _ in range(max_iter):
        ap = apply_matrix(p)
        alpha = rs / float(np.dot(p, ap))
        z = z + alpha * p
        r = r - alpha * ap
        rs_new = l2_norm_sq(r)
        if np.sqrt(rs_new) <= target:
            return z
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise LinearSolveError(residual=float(np.sqrt(rs)), max_iter=max_iter)


def phi_exact(
    oracle: BilevelOracle,
    x: Vector,
    y: Vector,
    cfg: LinearSolveConfig = LinearSolveConfig(),
) -> Vector:
    """Exact hypergradient surrogate at (x, y) via a CG linear solve.

    Returns grad_x f - J z where the inner Hessian H satisfies H z = grad_y f.
    All queries are full batch.
    """
    oracle._check_xy(x, y)
    gy = oracle.grad_y_f(x, y, FULL_F)
    max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * oracle.dim_y
    z = cg_solve(lambda v: oracle.hvp_yy_g(x, y, v, FULL_HESSIAN), gy, cfg.tol, max_iter)
    return oracle.grad_x_f(x, y, FULL_F) - oracle.jvp_xy_g(x, y, z, FULL_G)


@dataclass(frozen=True)
class PhiBatches:
    """One draw of every minibatch the stochastic hypergradient consumes.

    Reusing a PhiBatches instance at two different points evaluates the
    estimator with identical sample indices at both, which is what the
    momentum corrections of the accelerated algorithm require.
    """

    batch_f: Minibatch
    batch_g: Minibatch
    hess_batches: tuple[Minibatch, ...]


def draw_phi_batches(oracle: BilevelOracle, cfg: NeumannConfig, rng: RngStream) -> PhiBatches:
    """Draw the f batch, the coupling batch and Q independent Hessian batches."""
    batch_f = oracle.sample_minibatch(rng, "f", cfg.batch_f)
    batch_g = oracle.sample_minibatch(rng, "g", cfg.batch_g)
    hess = tuple(
        oracle.sample_minibatch(rng, "hessian", cfg.batch_hess) for _ in range(cfg.q_terms)
    )
    return PhiBatches(batch_f, batch_g, hess)


def neumann_apply_with_batches(
    oracle: BilevelOracle,
    x: Vector,
    y: Vector,
    v: Vector,
    eta: float,
    hess_batches: Sequence[Minibatch],
) -> Vector:
    """Apply the truncated-series inverse approximation to v.

    Computes eta * sum_{k=0..Q} w_k where w_0 = v and
    w_k = (I - eta * H(D_k)) w_{k-1}, the running right-to-left product;
    D_k is the k-th factor applied, drawn from the batch list back to
    front so that batch j sits at position j of the product. The k = 0
    term is the empty product, contributing eta * v.
    """
    oracle._check_v(v)
    w = v.copy()
    acc = v.copy()
    for batch in reversed(hess_batches):
        w = w - eta * oracle.hvp_yy_g(x, y, w, batch)
        acc += w
    return eta * acc


def neumann_inverse_apply(
    oracle: BilevelOracle,
    x: Vector,
    y: Vector,
    v: Vector,
    cfg: NeumannConfig,
    rng: RngStream,
) -> Vector:
    """Truncated-series inverse-Hessian estimate applied to v; Q fresh batches."""
    hess = tuple(
        oracle.sample_minibatch(rng, "hessian", cfg.batch_hess) for _ in range(cfg.q_terms)
    )
    return neumann_apply_with_batches(oracle, x, y, v, cfg.eta, hess)


def phi_with_batches(
    oracle: BilevelOracle,
    x: Vector,
    y: Vector,
    cfg: NeumannConfig,
    batches: PhiBatches,
) -> Vector:
    """Stochastic hypergradient at (x, y) using previously drawn batches."""
    oracle._check_xy(x, y)
    gy = oracle.grad_y_f(x, y, batches.batch_f)
    z = neumann_apply_with_batches(oracle, x, y, gy, cfg.eta, batches.hess_batches)
    return oracle.grad_x_f(x, y, batches.batch_f) - oracle.jvp_xy_g(x, y, z, batches.batch_g)


def phi_stochastic(
    oracle: BilevelOracle,
    x: Vector,
    y: Vector,
    cfg: NeumannConfig,
    rng: RngStream,
) -> Vector:
    """Stochastic hypergradient estimate with fresh, mutually independent batches.

    The f batch is shared between the two f-gradient queries; the coupling
    batch and every Hessian batch are drawn independently.
    """
    return phi_with_batches(oracle, x, y, cfg, draw_phi_batches(oracle, cfg, rng))
