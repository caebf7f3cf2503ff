import numpy as np
import pytest
from scipy import stats

from fedbilevel.numerics import DimensionMismatch, RngStream
from fedbilevel.oracle import FULL_F, FULL_G, FULL_HESSIAN, Minibatch, OracleCallCounter
from fedbilevel.problems import QuadraticBilevelOracle, make_quadratic

from conftest import scalar_instance


def central_diff(fun, point, index, step=1e-5):
    hi = point.copy()
    lo = point.copy()
    hi[index] += step
    lo[index] -= step
    return (fun(hi) - fun(lo)) / (2 * step)


class TestQuadraticFirstOrder:
    def test_grad_x_f_zero_without_coupling(self, identity_instance):
        o = identity_instance
        x, y = np.array([0.7, -0.3]), np.array([2.0, 5.0])
        np.testing.assert_array_equal(o.grad_x_f(x, y), [0.0, 0.0])

    def test_grad_y_f_at_minimizer(self, identity_instance):
        o = identity_instance
        np.testing.assert_array_equal(
            o.grad_y_f(np.zeros(2), np.array([1.0, 0.0])), [0.0, 0.0]
        )

    def test_grad_y_f_offset(self, identity_instance):
        o = identity_instance
        np.testing.assert_array_equal(
            o.grad_y_f(np.zeros(2), np.array([2.0, 1.0])), [1.0, 1.0]
        )

    def test_grad_y_f_affine(self, identity_instance):
        # For a quadratic, gradient differences are linear in the argument.
        o = identity_instance
        x = np.zeros(2)
        y = np.array([0.4, -1.2])
        lhs = o.grad_y_f(x, 2 * y) - o.grad_y_f(x, y)
        rhs = o.grad_y_f(x, y) - o.grad_y_f(x, np.zeros(2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-15)

    def test_grad_y_g_at_inner_optimum(self, identity_instance):
        o = identity_instance
        v = np.array([1.0, 1.0])
        np.testing.assert_array_equal(o.grad_y_g(v, v), [0.0, 0.0])

    def test_grad_y_g_offset(self, identity_instance):
        o = identity_instance
        np.testing.assert_array_equal(
            o.grad_y_g(np.zeros(2), np.array([1.0, 2.0])), [1.0, 2.0]
        )

    def test_dim_mismatch_rejected(self, identity_instance):
        with pytest.raises(DimensionMismatch):
            identity_instance.grad_y_f(np.zeros(3), np.zeros(2))


class TestQuadraticSecondOrder:
    def test_hvp_identity(self, identity_instance):
        o = identity_instance
        z = np.zeros(2)
        np.testing.assert_array_equal(o.hvp_yy_g(z, z, np.array([3.0, 4.0])), [3.0, 4.0])
        np.testing.assert_array_equal(o.hvp_yy_g(z, z, np.zeros(2)), [0.0, 0.0])

    def test_hvp_diagonal(self):
        o = QuadraticBilevelOracle(
            coupling=np.zeros((2, 2)), hessian=np.diag([2.0, 5.0]), target=np.zeros(2)
        )
        np.testing.assert_array_equal(
            o.hvp_yy_g(np.zeros(2), np.zeros(2), np.array([1.0, 1.0])), [2.0, 5.0]
        )

    def test_jvp_negated_identity(self, identity_instance):
        o = identity_instance
        z = np.zeros(2)
        np.testing.assert_array_equal(o.jvp_xy_g(z, z, np.array([1.0, 2.0])), [-1.0, -2.0])
        np.testing.assert_array_equal(o.jvp_xy_g(z, z, np.zeros(2)), [0.0, 0.0])

    def test_jvp_shear_coupling_vs_finite_difference(self):
        a = np.array([[1.0, 1.0], [0.0, 1.0]])
        o = QuadraticBilevelOracle(coupling=a, hessian=np.eye(2), target=np.zeros(2))
        x, y, v = np.array([0.3, -0.7]), np.array([0.2, 0.9]), np.array([1.0, 0.0])
        got = o.jvp_xy_g(x, y, v)
        np.testing.assert_allclose(got, [-1.0, -1.0], atol=1e-12)
        # Independent check: differentiate v' grad_y_g through x.
        fd = np.array(
            [
                central_diff(lambda xx: float(o.grad_y_g(xx, y) @ v), x, j)
                for j in range(2)
            ]
        )
        np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-8)

    def test_linearity_in_v(self):
        oracles, _ = make_quadratic(2, 3, 1, mu=0.5, smooth_l=3.0, zeta_scale=1.0, seed=5)
        o = oracles[0]
        rng = RngStream(11, 0)
        x, y = rng.normal(2), rng.normal(3)
        for _ in range(20):
            v, w = rng.normal(3), rng.normal(3)
            alpha = float(rng.normal(1)[0])
            lhs = o.hvp_yy_g(x, y, alpha * v + w)
            rhs = alpha * o.hvp_yy_g(x, y, v) + o.hvp_yy_g(x, y, w)
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)
            lhs_j = o.jvp_xy_g(x, y, alpha * v + w)
            rhs_j = alpha * o.jvp_xy_g(x, y, v) + o.jvp_xy_g(x, y, w)
            np.testing.assert_allclose(lhs_j, rhs_j, atol=1e-9)

    def test_strong_convexity_on_probes(self):
        oracles, _ = make_quadratic(2, 4, 3, mu=0.7, smooth_l=2.5, zeta_scale=1.0, seed=9)
        rng = RngStream(3, 0)
        for o in oracles:
            for _ in range(100):
                x, y, v = rng.normal(2), rng.normal(4), rng.normal(4)
                quad = float(o.hvp_yy_g(x, y, v) @ v)
                assert quad >= o.strong_convexity_mu * float(v @ v) * (1 - 1e-12)


class TestFiniteDifferences:
    def test_all_derivatives_match_values(self):
        oracles, _ = make_quadratic(
            2, 3, 1, mu=0.5, smooth_l=2.0, zeta_scale=1.0, seed=13, x_coupling=0.8
        )
        o = oracles[0]
        rng = RngStream(7, 0)
        for _ in range(10):
            x, y = rng.normal(2), rng.normal(3)
            fd_x = np.array(
                [central_diff(lambda xx: o.f_value(xx, y), x, j) for j in range(2)]
            )
            np.testing.assert_allclose(o.grad_x_f(x, y), fd_x, rtol=1e-5, atol=1e-7)
            fd_y = np.array(
                [central_diff(lambda yy: o.f_value(x, yy), y, j) for j in range(3)]
            )
            np.testing.assert_allclose(o.grad_y_f(x, y), fd_y, rtol=1e-5, atol=1e-7)
            fd_g = np.array(
                [central_diff(lambda yy: o.g_value(x, yy), y, j) for j in range(3)]
            )
            np.testing.assert_allclose(o.grad_y_g(x, y), fd_g, rtol=1e-5, atol=1e-7)
            v = rng.normal(3)
            fd_h = np.array(
                [
                    central_diff(lambda yy: float(o.grad_y_g(x, yy) @ v), y, j)
                    for j in range(3)
                ]
            )
            np.testing.assert_allclose(o.hvp_yy_g(x, y, v), fd_h, rtol=1e-5, atol=1e-7)


class TestStochasticOracles:
    @pytest.fixture
    def noisy(self):
        oracles, _ = make_quadratic(
            2, 3, 1, mu=1.0, smooth_l=2.0, zeta_scale=0.5, seed=21,
            num_samples=40, noise_sigma=0.3,
        )
        return oracles[0]

    def test_singleton_enumeration_matches_full_batch(self, noisy):
        rng = RngStream(1, 0)
        x, y = rng.normal(2), rng.normal(3)
        for kind, grad in (("f", noisy.grad_y_f), ("g", noisy.grad_y_g)):
            n = noisy.batch_population(kind)
            singles = [grad(x, y, Minibatch(kind, (i,))) for i in range(n)]
            np.testing.assert_allclose(
                np.mean(singles, axis=0), grad(x, y), atol=1e-10
            )

    def test_value_enumeration_matches_full_batch(self, noisy):
        rng = RngStream(2, 0)
        x, y = rng.normal(2), rng.normal(3)
        singles = [
            noisy.f_value(x, y, Minibatch("f", (i,))) for i in range(noisy.num_samples_f)
        ]
        assert abs(np.mean(singles) - noisy.f_value(x, y)) <= 1e-10


class TestSampling:
    def test_full_batch_sentinel(self, identity_instance):
        batch = identity_instance.sample_minibatch(RngStream(0, 0), "f", 0)
        assert batch.is_full and batch.indices == ()

    def test_determinism(self):
        oracles, _ = make_quadratic(1, 1, 1, 1.0, 1.0, 0.0, seed=2, num_samples=50)
        o = oracles[0]
        a = o.sample_minibatch(RngStream(4, 1), "g", 16)
        b = o.sample_minibatch(RngStream(4, 1), "g", 16)
        assert a == b

    def test_full_batch_consumes_no_randomness(self, identity_instance):
        rng = RngStream(8, 0)
        identity_instance.sample_minibatch(rng, "f", 0)
        after_full = rng.normal(4)
        np.testing.assert_array_equal(after_full, RngStream(8, 0).normal(4))

    def test_empirical_uniformity_chi_square(self):
        oracles, _ = make_quadratic(1, 1, 1, 1.0, 1.0, 0.0, seed=6, num_samples=20)
        o = oracles[0]
        rng = RngStream(123, 0)
        draws = 100_000
        batch = o.sample_minibatch(rng, "g", draws)
        counts = np.bincount(batch.indices, minlength=20)
        expected = draws / 20
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # 99.9th percentile of chi2 with 19 dof; a correct sampler fails
        # this with probability 1e-3 and the stream is fixed.
        assert chi2 <= stats.chi2.ppf(0.999, df=19)

    def test_unknown_kind_rejected(self, identity_instance):
        with pytest.raises(ValueError):
            identity_instance.sample_minibatch(RngStream(0, 0), "bogus", 4)

    def test_minibatch_kind_validated(self):
        with pytest.raises(ValueError):
            Minibatch("nope", (1, 2))


class TestCallCounter:
    def test_charges_match_batch_sizes(self):
        oracles, _ = make_quadratic(1, 2, 1, 1.0, 1.0, 0.0, seed=3, num_samples=10)
        counter = OracleCallCounter(oracles[0])
        x, y = np.zeros(1), np.zeros(2)
        counter.grad_y_f(x, y, Minibatch("f", (0, 1, 2)))
        assert counter.samples_charged == 3
        counter.grad_y_g(x, y)  # full batch of 10
        assert counter.samples_charged == 13

    def test_deterministic_oracle_charges_one(self, identity_instance):
        counter = OracleCallCounter(identity_instance)
        counter.grad_y_f(np.zeros(2), np.zeros(2))
        assert counter.samples_charged == 1


def test_scalar_instance_helper():
    o = scalar_instance(hess=2.0, target=1.0)
    assert o.strong_convexity_mu == 2.0
    np.testing.assert_array_equal(o.grad_y_f(np.zeros(1), np.zeros(1)), [-1.0])
