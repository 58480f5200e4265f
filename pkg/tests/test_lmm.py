import math
import warnings

import numpy as np
import pytest
from scipy import linalg, optimize, stats

from abcr.errors import NoConvergence, RankDeficientX, SingularV, VarianceFloorWarning
from abcr.estfun import TuningConstants, consistency_k, huber_psi
from abcr.godambe import simulate_psi
from abcr.lmm import (LmmDesign, LmmModel, LmmTheta, design_from_long, group_matrices,
                      lmm_loglik, lmm_psi_units, lmm_reml_fit, lmm_reml_loglik, lmm_simulate,
                      lmm_solve, reml2_correction, robust_reml2_psi)
from abcr.numerics import RngStream
from abcr.synthetic import generate_grp94
from abcr.toy import ContaminationSpec

TC = TuningConstants()
HUGE = TuningConstants(1e6, 1e6)


class Dense:
    """Full ``n x n`` versions of every LMM quantity, for small designs."""

    def __init__(self, design, s1, s2):
        self.X = design.X
        self.Z1 = linalg.block_diag(*[np.ones((m, 1)) for m in design.sizes])
        self.V = s1 * self.Z1 @ self.Z1.T + s2 * np.eye(design.n)
        w, U = np.linalg.eigh(self.V)
        self.Vis = (U / np.sqrt(w)) @ U.T
        self.Vi = np.linalg.inv(self.V)
        M = self.X.T @ self.Vi @ self.X
        self.P = self.Vi - self.Vi @ self.X @ np.linalg.solve(M, self.X.T @ self.Vi)
        self.M = M

    def psi(self, y, alpha, tc):
        r = self.Vis @ (y - self.X @ alpha)
        p1, p2 = huber_psi(r, tc.c1), huber_psi(r, tc.c2)
        k = consistency_k(tc.c2)
        out = [self.X.T @ self.Vis @ p1]
        for Z in (self.Z1, np.eye(len(y))):
            A = self.Vis @ Z @ Z.T @ self.Vis
            out.append([0.5 * (p2 @ A @ p2 - k * np.trace(self.P @ Z @ Z.T))])
        return np.concatenate(out)

    def reml_loglik(self, y):
        alpha = np.linalg.solve(self.M, self.X.T @ self.Vi @ y)
        e = y - self.X @ alpha
        n, q = self.X.shape
        return (-0.5 * np.linalg.slogdet(self.V)[1] - 0.5 * np.linalg.slogdet(self.M)[1]
                - 0.5 * e @ self.Vi @ e - 0.5 * (n - q) * math.log(2 * math.pi))


def unbalanced(seed=0, g=6):
    gen = np.random.default_rng(seed)
    blocks = []
    for j in range(g):
        m = 2 + j % 3
        blocks.append(np.column_stack([np.ones(m), gen.standard_normal(m), (np.arange(m) % 2)]))
    return LmmDesign.from_blocks(blocks)


class TestDesign:
    def test_nested_shape(self):
        d = LmmDesign.nested(5, 3)
        assert (d.n, d.q, d.g) == (15, 3, 5)
        np.testing.assert_array_equal(d.X[:3], [[1, 0, 0], [1, 1, 0], [1, 0, 1]])

    def test_rank_deficient(self):
        X = np.ones((6, 2))
        with pytest.raises(RankDeficientX):
            LmmDesign(X, [3, 3])

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            LmmDesign(np.ones((6, 1)), [3, 2])
        with pytest.raises(ValueError):
            LmmDesign(np.ones((2, 1)), [1, 1])

    def test_permuted(self):
        d = unbalanced()
        p, rows = d.permuted([5, 4, 3, 2, 1, 0])
        np.testing.assert_array_equal(p.X, d.X[rows])
        assert tuple(p.sizes) == tuple(d.sizes[::-1])

    def test_theta(self):
        t = LmmTheta([1.0, 2.0], 0.3, 0.4)
        assert LmmTheta.from_array(t.as_array()).sigma2_sq == 0.4
        with pytest.raises(ValueError):
            LmmTheta([1.0], 0.0, 1.0)


class TestGroupMatrices:
    @pytest.mark.parametrize("m", [1, 2, 5])
    def test_whitening(self, m):
        G = group_matrices(m, 0.7, 0.3)
        np.testing.assert_allclose(G.V_inv_sqrt @ G.V @ G.V_inv_sqrt, np.eye(m), atol=1e-10)
        np.testing.assert_allclose(G.V_inv_sqrt, G.V_inv_sqrt.T, atol=1e-15)
        np.testing.assert_allclose(G.V_inv, np.linalg.inv(G.V), atol=1e-12)

    def test_singular(self):
        with pytest.raises(SingularV):
            group_matrices(2, 1.0, 0.0)


class TestLoglik:
    def test_two_by_two(self):
        d = LmmDesign.from_blocks([np.eye(2), np.eye(2)])
        alpha = np.array([0.3, -0.2])
        y = d.X @ alpha
        # eigenvalues of V are s2 and s2 + 2 s1, so |V| = 3 per group
        expect = 2 * (-0.5 * math.log(3.0) - math.log(2 * math.pi))
        assert lmm_loglik(y, d, np.r_[alpha, 1.0, 1.0]) == pytest.approx(expect, abs=1e-12)

    def test_no_random_effect(self, rng):
        d = unbalanced()
        y = rng.standard_normal(d.n)
        th = np.r_[0.1, 0.2, -0.3, 1e-14, 0.8]
        expect = stats.norm.logpdf(y, d.X @ th[:3], math.sqrt(0.8)).sum()
        assert lmm_loglik(y, d, th) == pytest.approx(expect, abs=1e-8)

    def test_dense_oracle(self, rng, backend):
        d = unbalanced(1)
        y = rng.standard_normal(d.n) * 2
        th = np.r_[0.5, -1.0, 0.2, 0.6, 0.9]
        D = Dense(d, 0.6, 0.9)
        expect = stats.multivariate_normal(d.X @ th[:3], D.V).logpdf(y)
        assert lmm_loglik(y, d, th) == pytest.approx(expect, abs=1e-10)

    def test_singular(self):
        d = unbalanced()
        with pytest.raises(SingularV):
            lmm_loglik(np.zeros(d.n), d, np.r_[0, 0, 0, -1.0, 1.0])

    def test_reml_dense(self, rng):
        d = unbalanced(2)
        y = rng.standard_normal(d.n)
        assert lmm_reml_loglik(y, d, 0.4, 1.3) == pytest.approx(
            Dense(d, 0.4, 1.3).reml_loglik(y), abs=1e-10)


class TestSimulate:
    @pytest.mark.slow
    def test_central_covariance(self):
        d = LmmDesign.nested(100_000, 3)
        th = np.r_[1.0, 0.0, 0.0, 0.5, 0.25]
        e = (lmm_simulate(th, d, rng=RngStream(1)) - d.X @ th[:3]).reshape(-1, 3)
        V = group_matrices(3, 0.5, 0.25).V
        np.testing.assert_allclose(np.cov(e.T), V, rtol=0.03, atol=0.03 * V.max())

    @pytest.mark.slow
    def test_full_contamination(self):
        d = LmmDesign.nested(100_000, 3)
        th = np.r_[1.0, 0.0, 0.0, 0.5, 0.25]
        e = (lmm_simulate(th, d, ContaminationSpec(1.0, 15.0), RngStream(2))
             - d.X @ th[:3]).reshape(-1, 3)
        V = 15 * group_matrices(3, 0.5, 0.25).V
        np.testing.assert_allclose(np.cov(e.T), V, rtol=0.05, atol=0.05 * V.max())

    def test_seeded(self):
        d = unbalanced()
        th = np.r_[0, 0, 0, 1.0, 1.0]
        a = lmm_simulate(th, d, ContaminationSpec(0.1, 15), RngStream(3))
        b = lmm_simulate(th, d, ContaminationSpec(0.1, 15), RngStream(3))
        np.testing.assert_array_equal(a, b)


class TestEstimatingFunction:
    @pytest.mark.parametrize("tc", [TC, TuningConstants(0.8, 1.2), HUGE])
    def test_dense_oracle(self, rng, backend, tc):
        d = unbalanced(3)
        y = rng.standard_normal(d.n) * 1.5
        alpha = np.array([0.2, 0.1, -0.4])
        got = robust_reml2_psi(y, d, np.r_[alpha, 0.5, 0.7], tc)
        np.testing.assert_allclose(got, Dense(d, 0.5, 0.7).psi(y, alpha, tc), atol=1e-10)

    def test_projection(self):
        D = Dense(unbalanced(4), 0.5, 0.7)
        np.testing.assert_allclose(D.P @ D.X, 0.0, atol=1e-10)
        assert np.trace(D.P @ D.Z1 @ D.Z1.T) >= 0 and np.trace(D.P) >= 0

    def test_correction_dense(self):
        d = unbalanced(5)
        D = Dense(d, 0.5, 0.7)
        k = consistency_k(2.07)
        c = reml2_correction(d, 0.5, 0.7, k)
        np.testing.assert_allclose(c[:3], 0.0)
        assert c[3] == pytest.approx(0.5 * k * np.trace(D.P @ D.Z1 @ D.Z1.T), abs=1e-10)
        assert c[4] == pytest.approx(0.5 * k * np.trace(D.P), abs=1e-10)

    def test_zero_residuals(self):
        d = unbalanced()
        alpha = np.array([1.0, 2.0, 3.0])
        assert np.all(robust_reml2_psi(d.X @ alpha, d, np.r_[alpha, 0.5, 0.5])[:3] == 0.0)

    def test_units_sum(self, rng):
        d = unbalanced(6)
        y = rng.standard_normal(d.n)
        th = np.r_[0.1, 0.1, 0.1, 0.3, 0.9]
        np.testing.assert_allclose(lmm_psi_units(y, d, th).sum(axis=0),
                                   robust_reml2_psi(y, d, th), atol=1e-10)

    def test_huber_product_moments(self):
        # E[psi(R) psi(R)'] = k I for independent standard normal coordinates
        z = RngStream(7).generator().standard_normal((100_000, 6))
        p = huber_psi(z, 2.07)
        S = p.T @ p / z.shape[0]
        off = S[~np.eye(6, dtype=bool)]
        assert np.abs(off).max() < 4 * np.sqrt(consistency_k(2.07) ** 2 / z.shape[0])
        np.testing.assert_allclose(np.diag(S), consistency_k(2.07), rtol=0.02)

    @pytest.mark.slow
    def test_mean_at_fixed_theta(self):
        # at fixed theta the variance equations have mean k/2 tr((V^-1 - P) Z Z'),
        # which the REML projection only removes at the joint root
        d = LmmDesign.nested(30, 3)
        th = np.array([1.0, 0.5, -0.5, 0.4, 0.2])
        P = simulate_psi(LmmModel(d), th, 10_000, RngStream(1))
        D = Dense(d, 0.4, 0.2)
        k = consistency_k(2.07)
        R = D.Vi - D.P
        expect = np.r_[0, 0, 0, 0.5 * k * np.trace(R @ D.Z1 @ D.Z1.T), 0.5 * k * np.trace(R)]
        se = P.std(axis=0, ddof=1) / math.sqrt(P.shape[0])
        assert np.all(np.abs(P.mean(axis=0) - expect) < 4 * se)


class TestSolve:
    def _data(self, seed, g=30, cont=ContaminationSpec()):
        d = LmmDesign.nested(g, 3)
        th = np.r_[2.0, 0.5, -0.5, 0.5, 0.25]
        return d, th, lmm_simulate(th, d, cont, RngStream(seed))

    @pytest.mark.parametrize("seed", range(4))
    def test_root_certificate(self, seed):
        d, _, y = self._data(seed, cont=ContaminationSpec(0.1, 15))
        fit = lmm_solve(y, d)
        assert fit.psi_norm <= 1e-7
        assert np.abs(robust_reml2_psi(y, d, fit.theta.as_array())).max() <= 1e-7

    def test_classical_limit(self):
        d, _, y = self._data(10)
        fit = lmm_solve(y, d, HUGE)
        reml = lmm_reml_fit(y, d)
        np.testing.assert_allclose(fit.theta.as_array(), reml.as_array(), atol=1e-4)
        # independent dense optimiser
        neg = lambda x: -Dense(d, *np.exp(x)).reml_loglik(y)
        res = optimize.minimize(neg, np.log([0.5, 0.25]), method="BFGS", options={"gtol": 1e-10})
        np.testing.assert_allclose([fit.theta.sigma1_sq, fit.theta.sigma2_sq], np.exp(res.x),
                                   atol=1e-4)

    def test_consistency(self):
        d, th, y = self._data(11, g=200)
        fit = lmm_solve(y, d)
        model = LmmModel(d)
        from abcr.godambe import fit_mestimate
        me = fit_mestimate(model, y, nsim=300, rng=RngStream(12))
        assert np.all(np.abs(fit.theta.as_array() - th) < 3 * me.se)

    def test_permutation_invariance(self):
        d, _, y = self._data(13)
        order = np.random.default_rng(0).permutation(d.g)
        p, rows = d.permuted(order)
        a = lmm_solve(y, d).theta.as_array()
        b = lmm_solve(y[rows], p).theta.as_array()
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_robust_to_shifted_group(self):
        d, _, y = self._data(14)
        ys = y.copy()
        ys[:3] += 100.0
        rob = np.linalg.norm(lmm_solve(ys, d).theta.alpha - lmm_solve(y, d).theta.alpha)
        cls = np.linalg.norm(lmm_reml_fit(ys, d).alpha - lmm_reml_fit(y, d).alpha)
        assert rob < cls

    def test_floor_flag(self):
        d = LmmDesign.nested(10, 3)
        gen = np.random.default_rng(0)
        e = gen.standard_normal((10, 3))
        e -= e.mean(axis=1, keepdims=True)  # no between-group spread at all
        y = d.X @ np.array([1.0, 0.0, 0.0]) + e.ravel()
        with pytest.warns(VarianceFloorWarning):
            fit = lmm_solve(y, d)
        assert fit.negative_variance_floor and "sigma1_sq" in fit.floored

    def test_no_convergence(self):
        d, _, y = self._data(15)
        with pytest.raises(NoConvergence):
            lmm_solve(y, d, max_iter=1)


class TestModel:
    def test_interface(self, rng):
        d = unbalanced()
        m = LmmModel(d)
        assert m.dim == 5 and m.names[-2:] == ("sigma1_sq", "sigma2_sq")
        th = np.r_[0.1, 0.2, 0.3, 0.5, 0.6]
        y = m.simulate(th, rng)
        np.testing.assert_allclose(m.psi(y, th), robust_reml2_psi(y, d, th), atol=1e-12)
        assert m.loglik(y, np.r_[0, 0, 0, -1.0, 1.0]) == -np.inf

    def test_permutation_invariant_summary(self, rng):
        d = unbalanced(8)
        th = np.r_[0.1, 0.2, 0.3, 0.5, 0.6]
        y = lmm_simulate(th, d, rng=rng)
        p, rows = d.permuted(np.arange(d.g)[::-1])
        np.testing.assert_allclose(LmmModel(p).data_part(y[rows], th),
                                   LmmModel(d).data_part(y, th), atol=1e-12)


class TestLongFormat:
    def test_interaction_dimensions(self):
        rows = generate_grp94(0)
        y, d = design_from_long(rows, "IgG", interaction=True)
        assert d.q == 12 and d.g == 27 and y.size == 27 * 6
        y, d = design_from_long(rows, "IL6")
        assert d.q == 6 and d.g == 24

    def test_missing_response(self):
        with pytest.raises(ValueError):
            design_from_long(generate_grp94(0), "nope")

    def test_unbalanced_groups(self):
        rows = [r for r in generate_grp94(1, responses=["IL10"])
                if not (r["unit_id"] == "U01" and r["treatment_code"] == 3)]
        y, d = design_from_long(rows)
        assert y.size == len(rows) and d.sizes.sum() == len(rows)


@pytest.mark.slow
def test_wald_coverage():
    d = LmmDesign.nested(50, 3)
    th = np.r_[2.0, 0.5, -0.5, 0.5, 0.25]
    from abcr.godambe import fit_mestimate
    K = fit_mestimate(LmmModel(d), None, nsim=2000, rng=RngStream(99), theta_tilde=th).K
    se = np.sqrt(np.diag(K))[:3]
    hits = np.zeros(3)
    reps = 200
    for r in range(reps):
        y = lmm_simulate(th, d, rng=RngStream(100).child(r))
        hits += np.abs(lmm_solve(y, d).theta.alpha - th[:3]) <= 1.96 * se
    cov = hits / reps
    assert np.all((cov >= 0.90) & (cov <= 0.99)), cov
