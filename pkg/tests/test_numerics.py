import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbilevel.numerics import (
    DimensionMismatch,
    InfeasibleProjection,
    RngStream,
    as_vector,
    l2_norm_sq,
    mean_of_vectors,
    scale_add,
    simplex_project,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def vectors(min_dim=1, max_dim=8):
    return st.lists(finite_floats, min_size=min_dim, max_size=max_dim).map(np.array)


class TestScaleAdd:
    def test_basic(self):
        np.testing.assert_array_equal(
            scale_add(2.0, np.array([1.0, 1.0]), np.array([0.0, 1.0])), [2.0, 3.0]
        )

    def test_zero_scale_identity(self):
        np.testing.assert_array_equal(
            scale_add(0.0, np.array([5.0, 5.0]), np.array([1.0, 2.0])), [1.0, 2.0]
        )

    @given(vectors())
    def test_additive_inverse(self, v):
        np.testing.assert_array_equal(scale_add(-1.0, v, v), np.zeros_like(v))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            scale_add(1.0, np.zeros(2), np.zeros(3))

    @given(st.integers(-50, 50), st.lists(st.integers(-100, 100), min_size=1, max_size=6))
    def test_exact_on_integers(self, a, ints):
        v = np.array(ints, dtype=float)
        w = np.arange(len(ints), dtype=float)
        np.testing.assert_array_equal(scale_add(float(a), v, w), a * v + w)


class TestL2NormSq:
    def test_three_four_five(self):
        assert l2_norm_sq(np.array([3.0, 4.0])) == 25.0

    def test_zero(self):
        assert l2_norm_sq(np.zeros(4)) == 0.0

    def test_unit_entries(self):
        assert l2_norm_sq(np.ones(4)) == 4.0

    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False).filter(
                lambda x: x == 0.0 or abs(x) > 1e-120  # keep squares above underflow
            ),
            min_size=1,
            max_size=8,
        ).map(np.array)
    )
    def test_nonnegative_and_zero_iff_zero(self, v):
        n = l2_norm_sq(v)
        assert n >= 0.0
        assert (n == 0.0) == bool((v == 0).all())


class TestMeanOfVectors:
    def test_midpoint(self):
        np.testing.assert_array_equal(
            mean_of_vectors([np.zeros(2), np.array([2.0, 2.0])]), [1.0, 1.0]
        )

    def test_singleton_identity(self):
        v = np.array([3.0, -1.0])
        np.testing.assert_array_equal(mean_of_vectors([v]), v)

    def test_symmetric_cancellation(self):
        vs = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([-1.0, -1.0])]
        np.testing.assert_array_equal(mean_of_vectors(vs), [0.0, 0.0])

    @given(vectors(), st.integers(1, 9))
    def test_copies_reproduce_exactly(self, v, m):
        out = mean_of_vectors([v.copy() for _ in range(m)])
        assert (out == v).all()

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            mean_of_vectors([])

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mean_of_vectors([np.zeros(2), np.zeros(3)])


def grid_projection_oracle(v, total, floor, step=0.005):
    """Brute-force QP: minimize ||w - v||^2 over a fine grid of the feasible set.

    Only for 3-dimensional v: scans (w1, w2) and sets w3 by the sum constraint.
    """
    w1 = np.arange(floor, total, step)
    w2 = np.arange(floor, total, step)
    g1, g2 = np.meshgrid(w1, w2, indexing="ij")
    g3 = total - g1 - g2
    feasible = g3 >= floor
    dist = (g1 - v[0]) ** 2 + (g2 - v[1]) ** 2 + (g3 - v[2]) ** 2
    dist[~feasible] = np.inf
    best = np.unravel_index(np.argmin(dist), dist.shape)
    return np.array([g1[best], g2[best], g3[best]])


class TestSimplexProject:
    def test_feasible_point_unchanged(self):
        v = np.array([0.5, 1.0, 1.5])
        np.testing.assert_allclose(simplex_project(v, total=3.0, floor=0.1), v, atol=1e-12)

    def test_boundary_point_is_feasible(self):
        np.testing.assert_array_equal(
            simplex_project(np.array([2.0, 0.0]), total=2.0, floor=0.0), [2.0, 0.0]
        )

    def test_against_grid_oracle(self):
        # Expected value [2.8, 0.1, 0.1] frozen from the grid QP oracle below.
        v = np.array([10.0, 0.0, 0.0])
        got = simplex_project(v, total=3.0, floor=0.1)
        np.testing.assert_allclose(got, [2.8, 0.1, 0.1], atol=1e-12)
        oracle = grid_projection_oracle(v, total=3.0, floor=0.1)
        assert np.abs(got - oracle).max() <= 0.01

    def test_infeasible_rejected(self):
        with pytest.raises(InfeasibleProjection):
            simplex_project(np.zeros(3), total=1.0, floor=0.5)

    def test_floor_times_dim_rounding_tolerated(self):
        out = simplex_project(np.array([5.0] * 100), total=1.0, floor=0.01)
        np.testing.assert_allclose(out, np.full(100, 0.01), atol=1e-12)

    @given(vectors(min_dim=2, max_dim=6), st.floats(0.5, 10.0), st.floats(0.0, 0.05))
    @settings(max_examples=200)
    def test_output_feasible(self, v, total, floor):
        w = simplex_project(v, total=total, floor=floor)
        assert abs(w.sum() - total) <= 1e-9
        assert (w >= floor - 1e-12).all()

    @given(vectors(min_dim=2, max_dim=5))
    @settings(max_examples=100)
    def test_projection_is_closest_among_probes(self, v):
        # The projection must beat random feasible points on distance.
        w = simplex_project(v, total=1.0, floor=0.0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.dirichlet(np.ones(v.shape[0]))
            assert l2_norm_sq(w - v) <= l2_norm_sq(p - v) + 1e-9


class TestRngStream:
    def test_identical_keys_bitwise_identical(self):
        a = RngStream(123, 7).normal(100)
        b = RngStream(123, 7).normal(100)
        np.testing.assert_array_equal(a, b)
        ia = RngStream(9, 2).integers(0, 1000, 50)
        ib = RngStream(9, 2).integers(0, 1000, 50)
        np.testing.assert_array_equal(ia, ib)

    def test_distinct_streams_differ(self):
        a = RngStream(123, 0).normal(100)
        b = RngStream(123, 1).normal(100)
        assert not np.array_equal(a, b)

    def test_child_streams_deterministic(self):
        a = RngStream(5, 3).child(2).normal(10)
        b = RngStream(5, 3).child(2).normal(10)
        np.testing.assert_array_equal(a, b)
        c = RngStream(5, 3).child(3).normal(10)
        assert not np.array_equal(a, c)


class TestAsVector:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_vector([1.0, float("nan")])

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            as_vector(np.zeros((2, 2)))
