"""Hot numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: a loop-style implementation compiled with
``numba.njit`` and a vectorised numpy implementation.  The numba path is
used when numba is importable and the environment variable
``ABCR_DISABLE_NUMBA`` is unset (or ``0``/``false``).  ``set_backend`` swaps
paths at runtime, which is what the benchmark and the cross-check tests do.

Both paths compute the same quantities; results agree to floating-point
reassociation, not bit-for-bit.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _numba_requested() -> bool:
    flag = os.environ.get("ABCR_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# ---------------------------------------------------------------------------
# toy location-scale: sums of clipped standardised residuals
# ---------------------------------------------------------------------------

def _toy_stats_numpy(y, mu, sigma, c1, c2):
    z = (y - mu) / sigma
    return np.array([np.clip(z, -c1, c1).sum(), np.minimum(z * z, c2 * c2).sum()])


@_njit
def _toy_stats_numba(y, mu, sigma, c1, c2):
    s1 = 0.0
    s2 = 0.0
    c2sq = c2 * c2
    for i in range(y.shape[0]):
        z = (y[i] - mu) / sigma
        if z > c1:
            s1 += c1
        elif z < -c1:
            s1 -= c1
        else:
            s1 += z
        zz = z * z
        s2 += zz if zz < c2sq else c2sq
    out = np.empty(2)
    out[0] = s1
    out[1] = s2
    return out


# ---------------------------------------------------------------------------
# two-component nested LMM: per-group robust REML II data terms
#
# For a block of size m, V = s1*11' + s2*I has eigenvalues s2 (multiplicity
# m-1) and tau2 = s2 + m*s1 along 1, so the symmetric inverse root is
# V^{-1/2} v = (v - mean(v))/sqrt(s2) + mean(v)/sqrt(tau2).
# ---------------------------------------------------------------------------

def _lmm_group_terms_numpy(e, starts, sizes, X, s1, s2, c1, c2):
    sizes_f = sizes.astype(np.float64)
    tau2 = s2 + sizes_f * s1
    rs2 = math.sqrt(s2)
    rtau = np.sqrt(tau2)
    ebar = np.add.reduceat(e, starts) / sizes_f
    ebar_r = np.repeat(ebar, sizes)
    r = (e - ebar_r) / rs2 + ebar_r / np.repeat(rtau, sizes)
    p1 = np.clip(r, -c1, c1)
    p2 = np.clip(r, -c2, c2)
    p1bar = np.add.reduceat(p1, starts) / sizes_f
    p1bar_r = np.repeat(p1bar, sizes)
    v = (p1 - p1bar_r) / rs2 + p1bar_r / np.repeat(rtau, sizes)
    g = starts.shape[0]
    q = X.shape[1]
    out = np.empty((g, q + 2))
    out[:, :q] = np.add.reduceat(X * v[:, None], starts, axis=0)
    sum2 = np.add.reduceat(p2, starts)
    ss2 = np.add.reduceat(p2 * p2, starts)
    out[:, q] = sum2 * sum2 / tau2
    out[:, q + 1] = (ss2 - sum2 * sum2 / sizes_f) / s2 + sum2 * sum2 / (sizes_f * tau2)
    return out


@_njit
def _lmm_group_terms_numba(e, starts, sizes, X, s1, s2, c1, c2):
    g = starts.shape[0]
    q = X.shape[1]
    out = np.zeros((g, q + 2))
    rs2 = math.sqrt(s2)
    buf1 = np.empty(e.shape[0])
    for j in range(g):
        a = starts[j]
        m = sizes[j]
        tau2 = s2 + m * s1
        rtau = math.sqrt(tau2)
        ebar = 0.0
        for i in range(a, a + m):
            ebar += e[i]
        ebar /= m
        shift = ebar / rtau - ebar / rs2
        p1sum = 0.0
        sum2 = 0.0
        ss2 = 0.0
        for i in range(a, a + m):
            r = e[i] / rs2 + shift
            p1 = r
            if p1 > c1:
                p1 = c1
            elif p1 < -c1:
                p1 = -c1
            p2 = r
            if p2 > c2:
                p2 = c2
            elif p2 < -c2:
                p2 = -c2
            buf1[i] = p1
            p1sum += p1
            sum2 += p2
            ss2 += p2 * p2
        p1bar = p1sum / m
        vshift = p1bar / rtau - p1bar / rs2
        for i in range(a, a + m):
            v = buf1[i] / rs2 + vshift
            for k in range(q):
                out[j, k] += X[i, k] * v
        out[j, q] = sum2 * sum2 / tau2
        out[j, q + 1] = (ss2 - sum2 * sum2 / m) / s2 + sum2 * sum2 / (m * tau2)
    return out


def _lmm_loglik_numpy(e, starts, sizes, s1, s2):
    sizes_f = sizes.astype(np.float64)
    tau2 = s2 + sizes_f * s1
    esum = np.add.reduceat(e, starts)
    ess = np.add.reduceat(e * e, starts)
    quad = (ess - esum * esum / sizes_f) / s2 + esum * esum / (sizes_f * tau2)
    logdet = (sizes_f - 1.0) * math.log(s2) + np.log(tau2)
    n = e.shape[0]
    return -0.5 * float(np.sum(logdet + quad)) - 0.5 * n * math.log(2.0 * math.pi)


@_njit
def _lmm_loglik_numba(e, starts, sizes, s1, s2):
    total = 0.0
    ls2 = math.log(s2)
    for j in range(starts.shape[0]):
        a = starts[j]
        m = sizes[j]
        tau2 = s2 + m * s1
        esum = 0.0
        ess = 0.0
        for i in range(a, a + m):
            esum += e[i]
            ess += e[i] * e[i]
        quad = (ess - esum * esum / m) / s2 + esum * esum / (m * tau2)
        total += (m - 1.0) * ls2 + math.log(tau2) + quad
    return -0.5 * total - 0.5 * e.shape[0] * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# empirical likelihood: Lagrange multiplier by damped Newton
#
# Maximises sum log*(1 + eta'psi_i), where log* is the usual pseudo-log that
# continues log(x) quadratically below 1/n.  The maximiser coincides with
# the EL multiplier whenever zero is interior to the hull of the psi_i,
# which callers check before calling.
# ---------------------------------------------------------------------------

def _logstar_numpy(x, eps):
    out = np.empty_like(x)
    big = x >= eps
    out[big] = np.log(x[big])
    xs = x[~big]
    out[~big] = math.log(eps) - 1.5 + 2.0 * xs / eps - xs * xs / (2.0 * eps * eps)
    return out


def _logstar_derivs_numpy(x, eps):
    big = x >= eps
    d1 = np.where(big, 1.0 / np.where(big, x, 1.0), 2.0 / eps - x / (eps * eps))
    d2 = np.where(big, -1.0 / np.where(big, x * x, 1.0), -1.0 / (eps * eps))
    return d1, d2


def _el_batch_numpy(psi, max_iter, tol):
    B, n, d = psi.shape
    eps = 1.0 / n
    eta = np.zeros((B, d))
    obj = np.zeros(B)
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        P = psi[idx]
        x = 1.0 + np.einsum("bnd,bd->bn", P, eta[idx])
        d1, d2 = _logstar_derivs_numpy(x, eps)
        grad = np.einsum("bnd,bn->bd", P, d1)
        hess = np.einsum("bnd,bne,bn->bde", P, P, d2)
        step = -np.linalg.solve(hess, grad[..., None])[..., 0]
        # Newton decrement for an ascent step (hess is negative definite)
        dec = np.einsum("bd,bd->b", grad, step)
        tiny = np.abs(step).max(axis=1) <= 1e-13 * (1.0 + np.abs(eta[idx]).max(axis=1))
        done = (dec < tol) | tiny
        converged[idx[done]] = True
        active[idx[done]] = False
        keep = ~done
        if not keep.any():
            continue
        # quadratic regime: take the full step, objective differences are below rounding
        fast = keep & (dec < 1e-8)
        if fast.any():
            fi = idx[fast]
            eta[fi] += step[fast]
            obj[fi] = _logstar_numpy(1.0 + np.einsum("bnd,bd->bn", P[fast], eta[fi]), eps).sum(axis=1)
        keep &= ~fast
        if not keep.any():
            continue
        idx = idx[keep]
        P = P[keep]
        step = step[keep]
        base = obj[idx]
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        new_obj = np.full(idx.size, -np.inf)
        for _ls in range(60):
            cand = eta[idx] + t[:, None] * step
            val = _logstar_numpy(1.0 + np.einsum("bnd,bd->bn", P, cand), eps).sum(axis=1)
            ok = pending & (val >= base)
            new_obj[ok] = val[ok]
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        moved = ~pending
        eta[idx[moved]] += t[moved, None] * step[moved]
        obj[idx[moved]] = new_obj[moved]
        # no ascent possible from here: numerically at the optimum
        converged[idx[~moved]] = True
        active[idx[~moved]] = False
    return 2.0 * obj, eta, converged


@_njit
def _logstar_scalar(x, eps):
    if x >= eps:
        return math.log(x)
    return math.log(eps) - 1.5 + 2.0 * x / eps - x * x / (2.0 * eps * eps)


@_njit
def _el_batch_numba(psi, max_iter, tol):
    B, n, d = psi.shape
    eps = 1.0 / n
    W = np.zeros(B)
    etas = np.zeros((B, d))
    conv = np.zeros(B, dtype=np.bool_)
    grad = np.empty(d)
    hess = np.empty((d, d))
    cand = np.empty(d)
    for b in range(B):
        eta = np.zeros(d)
        obj = 0.0
        for _ in range(max_iter):
            grad[:] = 0.0
            hess[:, :] = 0.0
            for i in range(n):
                x = 1.0
                for k in range(d):
                    x += eta[k] * psi[b, i, k]
                if x >= eps:
                    d1 = 1.0 / x
                    d2 = -1.0 / (x * x)
                else:
                    d1 = 2.0 / eps - x / (eps * eps)
                    d2 = -1.0 / (eps * eps)
                for k in range(d):
                    grad[k] += psi[b, i, k] * d1
                    for l in range(d):
                        hess[k, l] += psi[b, i, k] * psi[b, i, l] * d2
            step = -np.linalg.solve(hess, grad)
            dec = 0.0
            for k in range(d):
                dec += grad[k] * step[k]
            smax = 0.0
            emax = 0.0
            for k in range(d):
                smax = max(smax, abs(step[k]))
                emax = max(emax, abs(eta[k]))
            if dec < tol or smax <= 1e-13 * (1.0 + emax):
                conv[b] = True
                break
            if dec < 1e-8:
                # quadratic regime; objective differences are below rounding
                for k in range(d):
                    eta[k] += step[k]
                obj = 0.0
                for i in range(n):
                    x = 1.0
                    for k in range(d):
                        x += eta[k] * psi[b, i, k]
                    obj += _logstar_scalar(x, eps)
                continue
            t = 1.0
            moved = False
            for _ls in range(60):
                for k in range(d):
                    cand[k] = eta[k] + t * step[k]
                val = 0.0
                for i in range(n):
                    x = 1.0
                    for k in range(d):
                        x += cand[k] * psi[b, i, k]
                    val += _logstar_scalar(x, eps)
                if val >= obj:
                    obj = val
                    for k in range(d):
                        eta[k] = cand[k]
                    moved = True
                    break
                t *= 0.5
            if not moved:
                conv[b] = True
                break
        W[b] = 2.0 * obj
        etas[b, :] = eta
    return W, etas, conv


# ---------------------------------------------------------------------------
# Gaussian KDE evaluated on a set of points
# ---------------------------------------------------------------------------

def _kde_eval_numpy(samples, points, bw):
    n = samples.shape[0]
    out = np.empty(points.shape[0])
    chunk = max(1, 2_000_000 // max(n, 1))
    norm = 1.0 / (n * bw * math.sqrt(2.0 * math.pi))
    for a in range(0, points.shape[0], chunk):
        u = (points[a:a + chunk, None] - samples[None, :]) / bw
        out[a:a + chunk] = np.exp(-0.5 * u * u).sum(axis=1) * norm
    return out


@_njit
def _kde_eval_numba(samples, points, bw):
    n = samples.shape[0]
    out = np.empty(points.shape[0])
    norm = 1.0 / (n * bw * math.sqrt(2.0 * math.pi))
    for p in range(points.shape[0]):
        s = 0.0
        x = points[p]
        for i in range(n):
            u = (x - samples[i]) / bw
            s += math.exp(-0.5 * u * u)
        out[p] = s * norm
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": {
        "toy_stats": _toy_stats_numpy,
        "lmm_group_terms": _lmm_group_terms_numpy,
        "lmm_loglik": _lmm_loglik_numpy,
        "el_batch": _el_batch_numpy,
        "kde_eval": _kde_eval_numpy,
    },
    "numba": {
        "toy_stats": _toy_stats_numba,
        "lmm_group_terms": _lmm_group_terms_numba,
        "lmm_loglik": _lmm_loglik_numba,
        "el_batch": _el_batch_numba,
        "kde_eval": _kde_eval_numba,
    },
}

_active = "numba" if (HAVE_NUMBA and _numba_requested()) else "numpy"


def backend() -> str:
    """Name of the active kernel path (``"numba"`` or ``"numpy"``)."""
    return _active


def set_backend(name: str) -> str:
    """Switch the kernel path; returns the previous one."""
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _active = _active, name
    return prev


def toy_stats(y, mu, sigma, c1, c2):
    """Return ``(sum psi_c1(z), sum psi_c2(z)**2)`` with ``z = (y - mu)/sigma``."""
    return _IMPLS[_active]["toy_stats"](y, float(mu), float(sigma), float(c1), float(c2))


def lmm_group_terms(e, starts, sizes, X, s1, s2, c1, c2):
    """Per-group robust REML II data terms, shape ``(g, q + 2)``.

    Columns ``:q`` hold ``X_j' V_j^{-1/2} psi_c1(r_j)``, column ``q`` holds
    ``(1' V_j^{-1/2} psi_c2(r_j))**2`` and column ``q+1`` holds
    ``psi_c2(r_j)' V_j^{-1} psi_c2(r_j)``, with ``r_j = V_j^{-1/2} e_j``.
    """
    return _IMPLS[_active]["lmm_group_terms"](
        e, starts, sizes, X, float(s1), float(s2), float(c1), float(c2))


def lmm_loglik(e, starts, sizes, s1, s2):
    """Gaussian log-likelihood of grouped residuals ``e`` under block-compound-symmetric V."""
    return _IMPLS[_active]["lmm_loglik"](e, starts, sizes, float(s1), float(s2))


def el_batch(psi, max_iter=100, tol=1e-22):
    """EL statistics for a stack of unit-contribution matrices ``(B, n, d)``.

    Returns ``(W, eta, converged)``.  Assumes zero is interior to every
    hull; hull checks live with the callers.
    """
    psi = np.ascontiguousarray(psi, dtype=np.float64)
    return _IMPLS[_active]["el_batch"](psi, int(max_iter), float(tol))


def kde_eval(samples, points, bw):
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    points = np.ascontiguousarray(np.atleast_1d(points), dtype=np.float64)
    return _IMPLS[_active]["kde_eval"](samples, points, float(bw))
