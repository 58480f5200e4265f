import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from abcr.errors import DegenerateSample
from abcr.harness import (EvidenceResult, SimStudyConfig, SimStudyRecord, config_hash,
                          contaminate_middle, draw_theta0, effective_sample_size, fbst_evidence,
                          posterior_summaries, run_abcr, sensitivity_study, simulation_study,
                          summarize_study, toy_posterior_quantiles)
from abcr.numerics import RngStream
from abcr.priors import PriorSpec
from abcr.sampler import Chain
from abcr.toy import ToyModel, toy_simulate


def normal_evalue(theta0, m, s):
    return 2.0 * stats.norm.cdf(-abs(theta0 - m) / s)


class TestEss:
    def test_constant(self):
        assert effective_sample_size(np.full(500, 2.0)) == 1.0

    def test_iid(self):
        x = np.random.default_rng(0).standard_normal(20_000)
        assert effective_sample_size(x) == pytest.approx(20_000, rel=0.15)

    def test_ar1(self):
        gen = np.random.default_rng(1)
        phi, n = 0.8, 100_000
        x = np.empty(n)
        x[0] = gen.standard_normal()
        e = gen.standard_normal(n)
        for i in range(1, n):
            x[i] = phi * x[i - 1] + e[i]
        # integrated autocorrelation time of an AR(1) is (1 + phi)/(1 - phi)
        assert effective_sample_size(x) == pytest.approx(n * (1 - phi) / (1 + phi), rel=0.15)

    def test_short(self):
        assert effective_sample_size([1.0]) == 1.0


class TestSummaries:
    def test_small_example(self):
        s = posterior_summaries(np.array([[1.0], [2.0], [3.0], [4.0], [5.0]]), ["a"])
        assert s["a"]["median"] == 3.0 and s["a"]["mean"] == 3.0

    def test_constant_chain(self):
        ch = Chain(np.full((100, 2), 7.0), 0.0, 0, 100, ("x", "y"))
        s = posterior_summaries(ch)
        for nm in ("x", "y"):
            for key in ("q025", "q25", "q50", "q75", "q975", "median", "mean"):
                assert s[nm][key] == 7.0
            assert s[nm]["ess"] == 1.0

    def test_row_vector(self):
        s = posterior_summaries(np.arange(10.0)[None, :])
        assert list(s) == ["theta0"] and s["theta0"]["median"] == 4.5

    def test_empty(self):
        with pytest.raises(ValueError):
            posterior_summaries(np.empty((0, 2)))


class TestFbst:
    def test_null_at_mode(self):
        x = RngStream(0).generator().standard_normal(20_000)
        assert fbst_evidence(x, 0.0).e_value >= 0.95

    def test_far_null(self):
        x = RngStream(1).generator().normal(4.0, 1.0, 20_000)
        assert fbst_evidence(x, 0.0).e_value <= 0.01

    @pytest.mark.parametrize("m,s,t0", [(0, 1, 0.5), (1, 2, -1), (-3, 0.5, -2.5),
                                        (2, 1, 3.7), (0, 3, 4), (10, 0.1, 10.05)])
    def test_normal_oracle(self, m, s, t0):
        # level sets are poorly resolved within half a standard deviation
        # of the mode, so offsets here are at least 0.5 s
        x = RngStream(2).child(f"{m},{s},{t0}").generator().normal(m, s, 200_000)
        assert fbst_evidence(x, t0).e_value == pytest.approx(normal_evalue(t0, m, s), abs=0.02)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-50, 50), st.floats(0.01, 100), st.floats(-3, 3))
    def test_affine_invariance(self, a, b, t0):
        x = RngStream(3).generator().standard_normal(5000)
        e1 = fbst_evidence(x, t0).e_value
        e2 = fbst_evidence(a + b * x, a + b * t0).e_value
        assert abs(e1 - e2) <= 0.01

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-10, 10))
    def test_range(self, seed, t0):
        x = np.random.default_rng(seed).standard_t(3, 1000)
        assert 0.0 <= fbst_evidence(x, t0).e_value <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            fbst_evidence(np.zeros(10))
        with pytest.raises(DegenerateSample):
            fbst_evidence(np.ones(2000))
        with pytest.raises(ValueError):
            EvidenceResult("x", 1.5, 0.1, 1000)


class TestSensitivity:
    def test_contaminate_middle(self):
        y = np.array([3.0, 1.0, 2.0])
        np.testing.assert_array_equal(contaminate_middle(y, 10.0), [1.0, 12.0, 3.0])
        np.testing.assert_array_equal(contaminate_middle(y, 0.0), [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            contaminate_middle(np.arange(4.0), 1.0)

    def test_zero_shift_reproduces_baseline(self):
        rows = sensitivity_study(c_grid=[0], methods=("abcr", "genuine"), seed=4, n=15,
                                 n_iter=3000, burn_in=500, n_grid=61)
        master = RngStream(4)
        y = toy_simulate((0.0, 1.0), 15, rng=master.child("data").generator())
        base = toy_posterior_quantiles("abcr", np.sort(y), PriorSpec.toy(),
                                       __import__("abcr").TuningConstants(),
                                       master.child("method:abcr"), n_iter=3000, burn_in=500)
        got = {r["parameter"]: r["median"] for r in rows if r["method"] == "abcr"}
        assert got["mu"] == base["mu"][1] and got["sigma"] == base["sigma"][1]
        assert all(r["seed"] == 4 and len(r["config_hash"]) == 12 for r in rows)

    def test_rows(self):
        rows = sensitivity_study(c_grid=[-2, 2], methods=("genuine", "el"), seed=5, n=11,
                                 n_grid=61)
        assert len(rows) == 2 * 2 * 2
        assert {r["method"] for r in rows} == {"genuine", "el"}
        g = {(r["c"], r["parameter"]): r["median"] for r in rows if r["method"] == "genuine"}
        assert g[(2, "mu")] > g[(-2, "mu")]

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            toy_posterior_quantiles("quasi", np.arange(5.0), PriorSpec.toy(), None, RngStream(0))


class TestRunAbcr:
    def test_deterministic(self):
        y = toy_simulate((0.0, 1.0), 40, rng=RngStream(6))
        kw = dict(n_iter=3000, burn_in=500)
        a = run_abcr(ToyModel(40), y, PriorSpec.toy(), RngStream(7), **kw)
        b = run_abcr(ToyModel(40), y, PriorSpec.toy(), RngStream(7), **kw)
        assert a.h == b.h and a.calibration == b.calibration
        np.testing.assert_array_equal(a.chain.draws, b.chain.draws)
        assert a.mest.source == "analytic"

    def test_fixed_h(self):
        y = toy_simulate((0.0, 1.0), 40, rng=RngStream(6))
        fit = run_abcr(ToyModel(40), y, PriorSpec.toy(), RngStream(7), n_iter=1000, burn_in=0,
                       h=0.5, godambe="monte_carlo", nsim=100)
        assert fit.h == 0.5 and fit.calibration == [] and fit.chain.draws.shape == (1000, 2)


class TestSimStudy:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimStudyConfig(n_reps=1)
        with pytest.raises(ValueError):
            SimStudyConfig(methods=("abcr", "vb"))
        with pytest.raises(ValueError):
            SimStudyConfig(regimes=("heavy",))

    def test_theta0_ranges(self):
        t = np.array([draw_theta0(3, np.random.default_rng(i)) for i in range(200)])
        assert np.all(np.abs(t[:, :3]) < 5) and np.all((t[:, 3:] > 1) & (t[:, 3:] < 10))

    def test_record(self):
        r = SimStudyRecord.build(0, 1, "abcr", "central", [1.0, 2.0], [1.5, 2.0])
        assert r.euclidean_bias == 0.5
        assert r.log_abs_bias[0] == pytest.approx(math.log(0.5)) and r.log_abs_bias[1] == -np.inf
        row = r.to_row(["a", "b"])
        assert row["median_a"] == 1.5 and row["log_abs_bias_b"] == -np.inf

    def test_summary_permutation_invariant(self):
        gen = np.random.default_rng(8)
        recs = [SimStudyRecord.build(i, i, m, g, gen.standard_normal(3), gen.standard_normal(3))
                for i in range(10) for m in ("abcr", "mcmc") for g in ("central", "contaminated")]
        a = summarize_study(recs, "xyz")
        b = summarize_study([recs[i] for i in gen.permutation(len(recs))], "xyz")
        assert a == b
        blk = a["regimes"]["central"]
        assert {"abcr", "mcmc", "efficiency_signed", "efficiency_abs"} <= set(blk)

    def test_small_run_deterministic(self):
        cfg = SimStudyConfig(n_reps=2, g=10, n_iter=2500, burn_in=500, mcmc_iter=2000,
                             mcmc_burn_in=500, nsim=60, pilot_iter=2000, seed=9)
        r1, s1, t1 = simulation_study(cfg, workers=1)
        r2, s2, _ = simulation_study(cfg, workers=2)
        assert [x.to_row(s1["names"]) for x in r1] == [x.to_row(s2["names"]) for x in r2]
        assert len(r1) + s1["n_failures"] == 2 * 2 * 2
        assert s1["config_hash"] == config_hash(cfg.to_dict())
        assert all(t["seconds"] >= 0 for t in t1)


def test_config_hash_stable():
    assert config_hash({"b": 1, "a": [1, 2]}) == config_hash({"a": [1, 2], "b": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
