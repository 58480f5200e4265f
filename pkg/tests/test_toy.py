import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from abcr.errors import DegenerateSample, NoConvergence
from abcr.estfun import TuningConstants, consistency_k
from abcr.godambe import simulate_psi
from abcr.numerics import RngStream, gauss_quadrature
from abcr.toy import (ContaminationSpec, ToyModel, ToyTheta, toy_analytic_HJ, toy_psi,
                      toy_psi_units, toy_simulate, toy_solve)

TC = TuningConstants()


def root_scan(y, tc=TC):
    """Nested bracketing oracle: mu(sigma) from the monotone location
    equation, then sigma from the scale equation along that curve."""
    def mu_of(sigma):
        f = lambda m: toy_psi(y, (m, sigma), tc)[0]
        return optimize.brentq(f, y.min() - 1, y.max() + 1, xtol=1e-14, rtol=1e-15)

    def g(sigma):
        return toy_psi(y, (mu_of(sigma), sigma), tc)[1]

    grid = np.geomspace(1e-3, 1e3, 400) * np.std(y)
    vals = [g(s) for s in grid]
    i = next(j for j in range(len(grid) - 1) if vals[j] > 0 >= vals[j + 1])
    s = optimize.brentq(g, grid[i], grid[i + 1], xtol=1e-14, rtol=1e-15)
    return mu_of(s), s


class TestTypes:
    def test_theta(self):
        t = ToyTheta(1.0, 2.0)
        np.testing.assert_array_equal(t.as_array(), [1.0, 2.0])
        assert ToyTheta.from_array([3, 4]) == ToyTheta(3.0, 4.0)
        with pytest.raises(ValueError):
            ToyTheta(0.0, 0.0)

    def test_contamination(self):
        with pytest.raises(ValueError):
            ContaminationSpec(-0.1, 2.0)
        with pytest.raises(ValueError):
            ContaminationSpec(0.1, 0.0)


class TestPsiUnits:
    def test_symmetric_sample(self):
        u = toy_psi_units(np.array([-1.0, 0.0, 1.0]), (0.0, 1.0))
        assert u[:, 0].sum() == 0.0

    def test_single_point(self):
        u = toy_psi_units(np.array([0.0]), (0.0, 1.0))
        assert u[0, 1] == pytest.approx(-consistency_k(2.07), abs=1e-15)

    def test_units_sum_to_psi(self, rng):
        y = rng.standard_normal(50)
        np.testing.assert_allclose(toy_psi_units(y, (0.2, 1.3)).sum(axis=0),
                                   toy_psi(y, (0.2, 1.3)), atol=1e-12)
        m = ToyModel(50)
        np.testing.assert_allclose(m.psi(y, np.array([0.2, 1.3])), toy_psi(y, (0.2, 1.3)), atol=1e-12)

    def test_unbiased(self):
        y = toy_simulate((0.0, 1.0), 10_000, rng=RngStream(3))
        u = toy_psi_units(y, (0.0, 1.0))
        se = u.std(axis=0, ddof=1) / math.sqrt(y.size)
        assert np.all(np.abs(u.mean(axis=0)) < 4 * se)

    def test_correction_cancels(self, rng):
        y, ys = rng.standard_normal(20), rng.standard_normal(20)
        th = np.array([0.1, 0.9])
        for c2 in (1.5, 2.07, 3.0):
            m = ToyModel(20, TuningConstants(1.345, c2))
            np.testing.assert_allclose(m.psi(y, th) - m.psi(ys, th),
                                       m.data_part(y, th) - m.data_part(ys, th), atol=1e-12)


class TestSolve:
    def test_symmetric(self):
        assert toy_solve(np.array([-1.0, 0.0, 1.0])).mu == 0.0

    def test_consistency(self):
        t = toy_solve(toy_simulate((0.0, 1.0), 5000, rng=RngStream(1)))
        assert abs(t.mu) < 0.05 and abs(t.sigma - 1.0) < 0.05

    @pytest.mark.parametrize("seed", range(5))
    def test_root_certificate_and_oracle(self, seed):
        y = toy_simulate((1.0, 2.0), 40, ContaminationSpec(0.1, 10.0), RngStream(seed))
        t = toy_solve(y)
        assert np.abs(toy_psi(y, t)).max() <= 1e-8
        mu, sigma = root_scan(y)
        assert t.mu == pytest.approx(mu, abs=1e-8)
        assert t.sigma == pytest.approx(sigma, abs=1e-8)

    def test_bounded_influence(self):
        y = toy_simulate((0.0, 1.0), 30, rng=RngStream(11))
        base = toy_solve(y)
        yc = np.append(y, 50.0)
        t = toy_solve(yc)
        assert abs(t.mu) < abs(yc.mean())
        bound = TC.c1 * t.sigma / yc.size * 1.5
        assert abs(t.mu - base.mu) < bound
        mu, sigma = root_scan(yc)
        assert t.mu == pytest.approx(mu, abs=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-100, 100), st.floats(0.01, 100), st.booleans(), st.integers(0, 1000))
    def test_equivariance(self, a, b, flip, seed):
        b = -b if flip else b
        y = toy_simulate((0.0, 1.0), 25, rng=RngStream(seed))
        t = toy_solve(y)
        u = toy_solve(a + b * y)
        assert u.mu == pytest.approx(a + b * t.mu, abs=1e-8 * max(1.0, abs(a), abs(b)))
        assert u.sigma == pytest.approx(abs(b) * t.sigma, rel=1e-8)

    def test_large_constants_give_mle(self, rng):
        y = rng.standard_normal(40) * 3 + 1
        t = toy_solve(y, TuningConstants(1e6, 1e6))
        assert t.mu == pytest.approx(y.mean(), abs=1e-6)
        assert t.sigma == pytest.approx(y.std(), abs=1e-6)

    def test_degenerate(self):
        with pytest.raises(DegenerateSample):
            toy_solve(np.array([1.0, 1.0, 1.0, 2.0]))
        with pytest.raises(DegenerateSample):
            toy_solve(np.array([1.0]))

    def test_no_convergence(self, rng):
        with pytest.raises(NoConvergence):
            toy_solve(rng.standard_normal(30), max_iter=1)


class TestSimulate:
    def test_central_is_exact_normal(self):
        a = toy_simulate((2.0, 3.0), 10, rng=RngStream(4))
        z = RngStream(4).generator().standard_normal(10)
        np.testing.assert_allclose(a, 2.0 + 3.0 * z)

    def test_full_contamination_variance(self):
        y = toy_simulate((0.0, 1.0), 10_000, ContaminationSpec(1.0, 10.0), RngStream(5))
        assert y.var() == pytest.approx(10.0, rel=0.10)

    def test_mixture_variance(self):
        y = toy_simulate((0.0, 1.0), 100_000, ContaminationSpec(0.1, 10.0), RngStream(6))
        assert y.var() == pytest.approx(1.9, rel=0.05)

    def test_seeded(self):
        a = toy_simulate((0, 1), 15, ContaminationSpec(0.1, 10), RngStream(8))
        b = toy_simulate((0, 1), 15, ContaminationSpec(0.1, 10), RngStream(8))
        np.testing.assert_array_equal(a, b)


class TestAnalyticHJ:
    def test_j11(self):
        H, J = toy_analytic_HJ((0.0, 1.0), TC, 1)
        assert abs(J[0, 0] - consistency_k(1.345)) <= 1e-10

    def test_off_diagonal(self):
        H, J = toy_analytic_HJ((0.5, 2.0), TC, 30)
        assert H[0, 1] == H[1, 0] == J[0, 1] == J[1, 0] == 0.0

    def test_scale_and_n(self):
        H1, J1 = toy_analytic_HJ((0.0, 1.0), TC, 1)
        H2, J2 = toy_analytic_HJ((0.0, 2.0), TC, 10)
        np.testing.assert_allclose(H2, H1 * 10 / 2.0, rtol=1e-12)
        np.testing.assert_allclose(J2, J1 * 10, rtol=1e-12)

    def test_h22_oracle(self):
        c2 = 2.07
        H, _ = toy_analytic_HJ((0.0, 1.0), TC, 1)
        # d/dsigma of -E psi_c2(Z/sigma)^2 at sigma = 1
        expect = 2 * gauss_quadrature(lambda z: z * z if abs(z) < c2 else 0.0, (-c2, c2))
        assert H[1, 1] == pytest.approx(expect, abs=1e-10)

    @pytest.mark.slow
    def test_monte_carlo_j(self):
        m = ToyModel(5)
        P = simulate_psi(m, np.array([0.0, 1.0]), 100_000, RngStream(12))
        J_mc = P.T @ P / P.shape[0]
        _, J = m.analytic_HJ(np.array([0.0, 1.0]))
        np.testing.assert_allclose(np.diag(J_mc), np.diag(J), rtol=0.02)
        assert abs(J_mc[0, 1]) < 0.02 * math.sqrt(J[0, 0] * J[1, 1])


def test_model_loglik(rng):
    y = rng.standard_normal(12)
    m = ToyModel(12)
    from scipy import stats
    assert m.loglik(y, (0.3, 1.4)) == pytest.approx(stats.norm.logpdf(y, 0.3, 1.4).sum())
    assert m.loglik(y, (0.3, -1.0)) == -np.inf
