"""Bilevel oracle contract: first/second-order queries of (f, g).

An oracle answers gradient, Hessian-vector and Jacobian-vector queries for
one client's outer objective f(x, y) and inner objective g(x, y), either
exactly (empty minibatch) or on a sampled minibatch. Implementations must
be immutable after construction; all randomness lives in the caller's
RngStream.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import DimensionMismatch, RngStream, Vector

BATCH_KINDS = ("f", "g", "hessian")

#: Sentinel for "use every sample" (deterministic query).
FULL_BATCH_SIZE = 0


@dataclass(frozen=True)
class Minibatch:
    """Sample indices for one stochastic query; empty means full batch."""

    kind: str
    indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in BATCH_KINDS:
            raise ValueError(f"unknown batch kind {self.kind!r}, expected one of {BATCH_KINDS}")

    @property
    def is_full(self) -> bool:
        return len(self.indices) == 0


FULL_F = Minibatch("f")
FULL_G = Minibatch("g")
FULL_HESSIAN = Minibatch("hessian")


@dataclass(frozen=True)
class OracleConstants:
    """Optional declared smoothness metadata, used only by diagnostics.

    None means "not declared". These are never consulted by the update
    rules themselves.
    """

    lipschitz_l: Optional[float] = None  # gradient Lipschitz constant of f and g
    grad_bound_m: Optional[float] = None  # bound on the gradients of f
    cross_bound: Optional[float] = None  # bound on the mixed second derivative of g
    cross_lipschitz: Optional[float] = None
    hess_lipschitz: Optional[float] = None


class BilevelOracle(ABC):
    """Abstract bilevel problem: all queries Algorithms consume.

    Subclasses set dim_x, dim_y, num_samples_f, num_samples_g (0 means the
    objective is deterministic) and strong_convexity_mu > 0, the declared
    strong-convexity constant of g in y.
    """

    dim_x: int
    dim_y: int
    num_samples_f: int = 0
    num_samples_g: int = 0
    strong_convexity_mu: float = 0.0
    constants: Optional[OracleConstants] = None

    # -- value queries (used by diagnostics and finite-difference tests) --

    @abstractmethod
    def f_value(self, x: Vector, y: Vector, batch: Minibatch = FULL_F) -> float:
        ...

    @abstractmethod
    def g_value(self, x: Vector, y: Vector, batch: Minibatch = FULL_G) -> float:
        ...

    # -- first-order queries --

    @abstractmethod
    def grad_x_f(self, x: Vector, y: Vector, batch: Minibatch = FULL_F) -> Vector:
        ...

    @abstractmethod
    def grad_y_f(self, x: Vector, y: Vector, batch: Minibatch = FULL_F) -> Vector:
        ...

    @abstractmethod
    def grad_y_g(self, x: Vector, y: Vector, batch: Minibatch = FULL_G) -> Vector:
        ...

    # -- second-order products (never materialize matrices) --

    @abstractmethod
    def hvp_yy_g(self, x: Vector, y: Vector, v: Vector, batch: Minibatch = FULL_HESSIAN) -> Vector:
        """Product of the inner Hessian in y with v."""

    @abstractmethod
    def jvp_xy_g(self, x: Vector, y: Vector, v: Vector, batch: Minibatch = FULL_G) -> Vector:
        """Product of the mixed second derivative of g with v; lands in x-space."""

    # -- optional closed-form inner solution --

    def inner_solution(self, x: Vector) -> Optional[Vector]:
        """argmin_y g(x, y) when known in closed form, else None."""
        return None

    # -- sampling --

    def batch_population(self, kind: str) -> int:
        if kind == "f":
            return self.num_samples_f
        return self.num_samples_g

    def sample_minibatch(self, rng: RngStream, kind: str, size: int) -> Minibatch:
        """Uniform i.i.d. indices with replacement; size 0 means full batch.

        A full-batch request consumes no randomness, so deterministic runs
        are independent of how often it is called.
        """
        if kind not in BATCH_KINDS:
            raise ValueError(f"unknown batch kind {kind!r}")
        if size < 0:
            raise ValueError(f"batch size must be >= 0, got {size}")
        population = self.batch_population(kind)
        if size == FULL_BATCH_SIZE or population == 0:
            return Minibatch(kind)
        idx = rng.integers(0, population, size)
        return Minibatch(kind, tuple(int(i) for i in idx))

    # -- shared validation helpers --

    def _check_xy(self, x: Vector, y: Vector) -> None:
        if x.shape != (self.dim_x,):
            raise DimensionMismatch(f"x has dim {x.shape[0]}, oracle expects {self.dim_x}")
        if y.shape != (self.dim_y,):
            raise DimensionMismatch(f"y has dim {y.shape[0]}, oracle expects {self.dim_y}")

    def _check_v(self, v: Vector) -> None:
        if v.shape != (self.dim_y,):
            raise DimensionMismatch(f"v has dim {v.shape[0]}, oracle expects {self.dim_y}")


class SingleLevelOracle(ABC):
    """Plain stochastic gradient oracle for the FedAvg baseline."""

    dim: int
    num_samples: int = 0

    @abstractmethod
    def value(self, x: Vector, batch: Minibatch = FULL_F) -> float:
        ...

    @abstractmethod
    def grad(self, x: Vector, batch: Minibatch = FULL_F) -> Vector:
        ...

    def sample_minibatch(self, rng: RngStream, size: int) -> Minibatch:
        if size < 0:
            raise ValueError(f"batch size must be >= 0, got {size}")
        if size == FULL_BATCH_SIZE or self.num_samples == 0:
            return Minibatch("f")
        idx = rng.integers(0, self.num_samples, size)
        return Minibatch("f", tuple(int(i) for i in idx))


class OracleCallCounter(BilevelOracle):
    """Delegating wrapper that charges each query its per-sample cost.

    A query on a minibatch of size b costs b samples; a full-batch query
    costs the population size (or 1 for a purely deterministic oracle).
    Used to compare algorithms at matched oracle budgets.
    """

    def __init__(self, base: BilevelOracle):
        self.base = base
        self.dim_x = base.dim_x
        self.dim_y = base.dim_y
        self.num_samples_f = base.num_samples_f
        self.num_samples_g = base.num_samples_g
        self.strong_convexity_mu = base.strong_convexity_mu
        self.constants = base.constants
        self.samples_charged = 0

    def _charge(self, batch: Minibatch) -> None:
        if batch.is_full:
            self.samples_charged += max(1, self.base.batch_population(batch.kind))
        else:
            self.samples_charged += len(batch.indices)

    def f_value(self, x, y, batch=FULL_F):
        self._charge(batch)
        return self.base.f_value(x, y, batch)

    def g_value(self, x, y, batch=FULL_G):
        self._charge(batch)
        return self.base.g_value(x, y, batch)

    def grad_x_f(self, x, y, batch=FULL_F):
        self._charge(batch)
        return self.base.grad_x_f(x, y, batch)

    def grad_y_f(self, x, y, batch=FULL_F):
        self._charge(batch)
        return self.base.grad_y_f(x, y, batch)

    def grad_y_g(self, x, y, batch=FULL_G):
        self._charge(batch)
        return self.base.grad_y_g(x, y, batch)

    def hvp_yy_g(self, x, y, v, batch=FULL_HESSIAN):
        self._charge(batch)
        return self.base.hvp_yy_g(x, y, v, batch)

    def jvp_xy_g(self, x, y, v, batch=FULL_G):
        self._charge(batch)
        return self.base.jvp_xy_g(x, y, v, batch)

    def inner_solution(self, x):
        return self.base.inner_solution(x)
