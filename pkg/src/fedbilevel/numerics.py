"""Dense vector arithmetic, seedable RNG streams, and simplex projection.

Vectors are plain 1-D float64 numpy arrays. All operations are pure: they
never mutate their inputs and they validate dimensions up front.
"""

from __future__ import annotations

import numpy as np

Vector = np.ndarray


class DimensionMismatch(ValueError):
    """Raised when two vectors of different lengths are combined."""


class InfeasibleProjection(ValueError):
    """Raised when the requested simplex has no feasible point."""


def as_vector(values) -> Vector:
    """Coerce to a 1-D float64 array, rejecting non-finite entries."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def _check_dims(v: Vector, w: Vector) -> None:
    if v.shape != w.shape:
        raise DimensionMismatch(f"dimension mismatch: {v.shape[0]} vs {w.shape[0]}")


def scale_add(a: float, v: Vector, w: Vector) -> Vector:
    """Return a*v + w."""
    _check_dims(v, w)
    return a * v + w


def l2_norm_sq(v: Vector) -> float:
    """Squared Euclidean norm."""
    return float(np.dot(v, v))


def mean_of_vectors(vs: list[Vector]) -> Vector:
    """Componentwise mean of a nonempty list of equal-length vectors.

    Identical inputs return an exact copy of the common vector, so that
    averaging a list of already-synchronized states is exactly a no-op
    (the mean of M identical copies must reproduce the copy bit for bit,
    which naive sum-then-divide does not guarantee for every M).
    """
    if not vs:
        raise ValueError("mean_of_vectors: empty list")
    first = vs[0]
    for v in vs[1:]:
        _check_dims(first, v)
    stacked = np.stack(vs)
    if (stacked == first).all():
        return first.copy()
    return stacked.mean(axis=0)


def simplex_project(v: Vector, total: float, floor: float = 0.0) -> Vector:
    """Euclidean projection of v onto {w : w_i >= floor, sum(w) == total}.

    Uses the sorted-threshold algorithm on the shifted problem
    u = w - floor, which is a projection onto the standard scaled simplex.
    """
    v = np.asarray(v, dtype=np.float64)
    k = v.shape[0]
    if total <= 0:
        raise InfeasibleProjection(f"total must be positive, got {total}")
    if floor < 0:
        raise InfeasibleProjection(f"floor must be nonnegative, got {floor}")
    budget = total - floor * k
    if budget < 0:
        # Tolerate rounding noise in floor*k (e.g. 0.01 * 100 > 1.0 by one ulp).
        if budget > -1e-9 * max(1.0, abs(total)):
            budget = 0.0
        else:
            raise InfeasibleProjection(
                f"infeasible simplex: floor*dim = {floor * k} exceeds total = {total}"
            )
    shifted = v - floor
    if budget == 0:
        return np.full(k, floor)
    # Threshold tau such that sum(max(shifted - tau, 0)) == budget.
    u = np.sort(shifted)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1])
    tau = css[rho] / (rho + 1)
    return np.maximum(shifted - tau, 0.0) + floor


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Two streams constructed with the same key reproduce identical draws;
    distinct stream_ids give statistically independent streams. Streams
    are single-owner: never share one across concurrently running clients.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)))
        )

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream; deterministic in (key, tag)."""
        return RngStream(self.seed, self.stream_id * 1_000_003 + tag + 1)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
