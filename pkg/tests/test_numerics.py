import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special, stats

from feelsched.numerics import (
    InfeasibleStartError,
    RngStream,
    SolverDidNotConverge,
    SolverOptions,
    Source,
    bisect,
    lambert_w_m1,
    sample_truncated_gaussian,
    sample_truncated_poisson,
    solve_barrier,
    truncated_poisson_pmf,
)


def w_by_bisection(psi):
    return bisect(lambda w: w * math.exp(w) - psi, -50.0, -1.0)


class TestLambert:
    def test_branch_point(self):
        assert lambert_w_m1(-1.0 / math.e) == pytest.approx(-1.0, abs=1e-7)

    @pytest.mark.parametrize("psi", [-0.2, -1e-6, -0.3, -0.01, -0.36])
    def test_matches_bisection(self, psi):
        w = lambert_w_m1(psi)
        assert w == pytest.approx(w_by_bisection(psi), rel=1e-12)
        assert w <= -1.0

    def test_known_value(self):
        assert lambert_w_m1(-0.2) == pytest.approx(-2.5426413577735265, rel=1e-14)

    def test_small_psi_asymptote(self):
        psi = -1e-6
        w = lambert_w_m1(psi)
        assert w < -10
        approx = math.log(-psi) - math.log(-math.log(-psi))
        assert abs(w - approx) / abs(w) < 0.1

    def test_agrees_with_scipy(self):
        psi = -np.exp(-np.linspace(1.001, 600, 200))
        ours = np.array([lambert_w_m1(p) for p in psi])
        ref = special.lambertw(psi, k=-1).real
        np.testing.assert_allclose(ours, ref, rtol=1e-12)

    @pytest.mark.parametrize("psi", [0.0, 0.1, -0.5, -1.0])
    def test_domain(self, psi):
        with pytest.raises(ValueError):
            lambert_w_m1(psi)

    @given(st.floats(min_value=1.0 + 1e-9, max_value=700.0))
    def test_residual_property(self, s):
        psi = -math.exp(-s)
        w = lambert_w_m1(psi)
        assert w <= -1.0
        assert abs(w * math.exp(w) - psi) <= 1e-12 * abs(psi)

    def test_bulk_residual(self):
        rng = RngStream(1, 0)
        psi = -np.exp(-rng.uniform(1.0 + 1e-12, 700, size=10_000))
        w = np.array([lambert_w_m1(p) for p in psi])
        assert np.all(np.abs(w * np.exp(w) - psi) <= 1e-12 * np.abs(psi))
        assert np.all(w <= -1.0)


class TestRng:
    def test_replay(self):
        a = RngStream.for_device(5, 0, Source.CHANNEL, 3)
        b = RngStream.for_device(5, 0, Source.CHANNEL, 3)
        np.testing.assert_array_equal(a.normal(size=20), b.normal(size=20))

    @pytest.mark.parametrize("other", [(6, 0, Source.CHANNEL, 3), (5, 1, Source.CHANNEL, 3),
                                       (5, 0, Source.ARRIVALS, 3), (5, 0, Source.CHANNEL, 4)])
    def test_streams_disjoint(self, other):
        a = RngStream.for_device(5, 0, Source.CHANNEL, 3).random(8)
        b = RngStream.for_device(*other).random(8)
        assert not np.array_equal(a, b)

    def test_independent_of_draw_order(self):
        s1 = [RngStream.for_device(0, 0, Source.CAPACITY, k) for k in range(4)]
        s2 = [RngStream.for_device(0, 0, Source.CAPACITY, k) for k in reversed(range(4))]
        first = [s.uniform() for s in s1]
        second = [s.uniform() for s in s2][::-1]
        assert first == second


class TestBarrier:
    @staticmethod
    def quadratic(Q, c):
        return lambda x: (0.5 * x @ Q @ x + c @ x, Q @ x + c, Q)

    @staticmethod
    def lower_bounds(lows):
        def make(i):
            def g(x):
                grad = np.zeros(len(lows))
                grad[i] = -1.0
                return lows[i] - x[i], grad, np.zeros((len(lows), len(lows)))
            return g
        return [make(i) for i in range(len(lows))]

    def test_single_variable(self):
        x = solve_barrier(self.quadratic(np.eye(1), np.zeros(1)), self.lower_bounds([0.2]), np.array([1.0]))
        np.testing.assert_array_equal(x, [1.0])

    def test_symmetric_pair(self):
        x = solve_barrier(self.quadratic(np.eye(2), np.zeros(2)), self.lower_bounds([0.1, 0.1]),
                          np.array([0.3, 0.7]))
        np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-8)

    def test_active_bound(self):
        # unconstrained optimum is (1, 0): the lower bound 0.3 on x1 becomes active
        obj = self.quadratic(np.eye(2), np.array([-1.0, 0.0]))
        x = solve_barrier(obj, self.lower_bounds([0.0, 0.3]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(x, [0.7, 0.3], atol=1e-7)
        assert x[1] > 0.3

    def test_infeasible_start(self):
        with pytest.raises(InfeasibleStartError):
            solve_barrier(self.quadratic(np.eye(2), np.zeros(2)), self.lower_bounds([0.1, 0.1]),
                          np.array([0.05, 0.95]))
        with pytest.raises(InfeasibleStartError):
            solve_barrier(self.quadratic(np.eye(2), np.zeros(2)), [], np.array([0.5, 0.6]))

    def test_iteration_cap(self):
        opts = SolverOptions(max_newton_iters=1)
        with pytest.raises(SolverDidNotConverge) as exc:
            solve_barrier(self.quadratic(np.diag([1.0, 50.0, 3.0]), np.array([-5.0, 1.0, 0.3])),
                          self.lower_bounds([0.01, 0.01, 0.01]), np.full(3, 1 / 3), opts)
        assert exc.value.best.shape == (3,)

    @pytest.mark.parametrize("field,value", [("backtrack_alpha", 0.5), ("backtrack_beta", 1.0),
                                             ("barrier_mu", 1.0), ("duality_gap", 0.0)])
    def test_options_validated(self, field, value):
        with pytest.raises(ValueError):
            SolverOptions(**{field: value})

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_projected_gradient(self, seed):
        rng = RngStream(seed, 7)
        n = 4
        B = rng.normal(size=(n, n))
        Q = B @ B.T + 0.5 * np.eye(n)
        c = rng.normal(size=n)
        lows = np.zeros(n)
        x = solve_barrier(self.quadratic(Q, c), self.lower_bounds(lows), np.full(n, 1.0 / n))
        assert abs(x.sum() - 1.0) <= 1e-10
        assert np.all(x >= -1e-10)
        # projected-gradient oracle on the probability simplex
        y = np.full(n, 1.0 / n)
        step = 1.0 / np.linalg.eigvalsh(Q)[-1]
        for _ in range(20_000):
            y = project_simplex(y - step * (Q @ y + c))
        f = lambda z: 0.5 * z @ Q @ z + c @ z
        assert f(x) <= f(y) + 1e-6


def project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    r = idx[u - css / idx > 0][-1]
    return np.maximum(v - css[r - 1] / r, 0.0)


class TestTruncatedGaussian:
    def test_mean_matches_quadrature(self):
        rng = RngStream(3, 0)
        x = sample_truncated_gaussian(0.5, 0.2, 0.0, 1.0, rng, size=100_000)
        z = stats.norm.cdf(1, 0.5, 0.2) - stats.norm.cdf(0, 0.5, 0.2)
        mean = integrate.quad(lambda t: t * stats.norm.pdf(t, 0.5, 0.2) / z, 0, 1)[0]
        assert abs(x.mean() - mean) < 3 * x.std() / math.sqrt(x.size)

    def test_mean_outside_support(self):
        rng = RngStream(3, 1)
        x = sample_truncated_gaussian(-1.0, 0.3, 0.0, 1.0, rng, size=500)
        assert np.all((x >= 0) & (x <= 1))

    def test_concentrates(self):
        x = sample_truncated_gaussian(0.5, 1e-9, 0.0, 1.0, RngStream(3, 2))
        assert float(x) == pytest.approx(0.5, abs=1e-6)

    def test_far_tail_fallback(self):
        # acceptance probability ~1e-80: rejection cannot succeed, inverse CDF takes over
        x = sample_truncated_gaussian(0.0, 0.05, 1.0, 2.0, RngStream(3, 3), size=5)
        assert np.all((x >= 1.0) & (x <= 2.0))

    def test_replay(self):
        a = sample_truncated_gaussian(0.2, 0.4, 0, 1, RngStream(9, 9), size=50)
        b = sample_truncated_gaussian(0.2, 0.4, 0, 1, RngStream(9, 9), size=50)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("args", [(0, 1, 1, 1), (0, 0, 0, 1), (0, -1, 0, 1)])
    def test_bad_args(self, args):
        with pytest.raises(ValueError):
            sample_truncated_gaussian(*args, RngStream(0, 0))


class TestTruncatedPoisson:
    def test_rate_zero(self):
        assert int(sample_truncated_poisson(0.0, 5, RngStream(1, 1))) == 0

    def test_hi_zero(self):
        assert int(sample_truncated_poisson(3.0, 0, RngStream(1, 1))) == 0

    def test_pmf_normalised(self):
        p = truncated_poisson_pmf(2.5, 7)
        assert p.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(p, stats.poisson.pmf(np.arange(8), 2.5) / stats.poisson.cdf(7, 2.5))

    def test_empirical_pmf(self):
        n = 100_000
        x = sample_truncated_poisson(1.0, 5, RngStream(4, 4), size=n)
        p = truncated_poisson_pmf(1.0, 5)
        for k in range(4):
            freq = np.mean(x == k)
            assert abs(freq - p[k]) < 3 * math.sqrt(p[k] * (1 - p[k]) / n)

    @given(st.floats(0, 30), st.integers(0, 40))
    def test_support(self, rate, hi):
        x = sample_truncated_poisson(rate, hi, RngStream(0, 0), size=20)
        assert np.all((x >= 0) & (x <= hi))


def test_bisect_simple():
    assert bisect(lambda x: x * x - 2.0, 0.0, 2.0) == pytest.approx(math.sqrt(2), rel=1e-14)
