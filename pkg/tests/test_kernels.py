import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from abcr import kernels
from abcr.lmm import LmmDesign

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def both(name, *args):
    prev = kernels.backend()
    try:
        kernels.set_backend("numpy")
        a = getattr(kernels, name)(*args)
        kernels.set_backend("numba")
        b = getattr(kernels, name)(*args)
    finally:
        kernels.set_backend(prev)
    return a, b


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_set_backend_returns_previous():
    prev = kernels.set_backend("numpy")
    try:
        assert kernels.backend() == "numpy"
    finally:
        kernels.set_backend(prev)


def test_env_flag_disables_numba():
    code = "from abcr import kernels; print(kernels.backend())"
    env = dict(os.environ, ABCR_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"


@needs_numba
class TestAgreement:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 10_000), st.floats(-3, 3), st.floats(0.1, 5))
    def test_toy_stats(self, n, seed, mu, sigma):
        y = np.random.default_rng(seed).standard_t(3, n)
        a, b = both("toy_stats", y, mu, sigma, 1.345, 2.07)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_lmm_group_terms(self, seed):
        gen = np.random.default_rng(seed)
        blocks = [np.column_stack([np.ones(m), gen.standard_normal((m, 2))])
                  for m in gen.integers(1, 7, 25)]
        d = LmmDesign.from_blocks(blocks + [np.eye(3)])
        e = gen.standard_t(2, d.n)
        a, b = both("lmm_group_terms", e, d.starts, d.sizes, d.X, 0.4, 0.9, 1.345, 2.07)
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)

    def test_lmm_loglik(self, rng):
        d = LmmDesign.nested(40, 3)
        e = rng.standard_normal(d.n)
        a, b = both("lmm_loglik", e, d.starts, d.sizes, 0.3, 1.1)
        assert a == pytest.approx(b, rel=1e-13)

    def test_el_batch(self, rng):
        psi = rng.standard_normal((50, 20, 2)) + 0.2
        (wa, ea, ca), (wb, eb, cb) = both("el_batch", psi)
        assert ca.all() and cb.all()
        np.testing.assert_allclose(wa, wb, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(ea, eb, rtol=1e-7, atol=1e-10)

    def test_kde(self, rng):
        s = rng.standard_normal(500)
        p = np.linspace(-4, 4, 301)
        a, b = both("kde_eval", s, p, 0.3)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_el_zero_at_centred(backend):
    gen = np.random.default_rng(0)
    psi = gen.standard_normal((3, 10, 2))
    psi -= psi.mean(axis=1, keepdims=True)
    W, eta, conv = kernels.el_batch(psi)
    np.testing.assert_allclose(W, 0.0, atol=1e-12)
    np.testing.assert_allclose(eta, 0.0, atol=1e-12)


def test_kde_integrates_to_one(backend):
    s = np.random.default_rng(1).standard_normal(200)
    x = np.linspace(-8, 8, 4001)
    f = kernels.kde_eval(s, x, 0.4)
    assert integrate.trapezoid(f, x) == pytest.approx(1.0, abs=1e-6)
