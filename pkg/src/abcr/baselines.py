"""Comparison posteriors: adaptive full-likelihood MH, empirical likelihood, grids."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import kernels
from .errors import GridTooNarrow, NewtonFailure, StuckChainWarning
from .estfun import TuningConstants, consistency_k, huber_psi
from .numerics import RngStream, as_generator
from .priors import HalfCauchy, Normal, PriorSpec  # noqa: F401  (re-exported)
from .sampler import Chain
from .godambe import sandwich
from .toy import toy_analytic_HJ, toy_psi_units, toy_solve

__all__ = [
    "PriorSpec", "full_mh", "laplace_cov", "el_wstat", "el_wstat_units",
    "el_wstat_batch", "hull_interior", "hull_interior_2d", "GridPosterior",
    "grid_posterior",
]


# ---------------------------------------------------------------------------
# adaptive random-walk Metropolis-Hastings
# ---------------------------------------------------------------------------

def laplace_cov(logpost, x0, step: float = 1e-4) -> np.ndarray:
    """Inverse negative Hessian of ``logpost`` at ``x0`` by central differences.

    Falls back to a diagonal guess when the Hessian is not negative definite.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    hs = step * np.maximum(1.0, np.abs(x0))
    f0 = logpost(x0)
    Hm = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = hs[i]
            ej[j] = hs[j]
            if i == j:
                v = (logpost(x0 + ei) - 2.0 * f0 + logpost(x0 - ei)) / hs[i] ** 2
            else:
                v = (logpost(x0 + ei + ej) - logpost(x0 + ei - ej)
                     - logpost(x0 - ei + ej) + logpost(x0 - ei - ej)) / (4.0 * hs[i] * hs[j])
            Hm[i, j] = Hm[j, i] = v
    try:
        if not np.all(np.isfinite(Hm)):
            raise np.linalg.LinAlgError
        C = np.linalg.inv(-Hm)
        np.linalg.cholesky(C)
        return 0.5 * (C + C.T)
    except np.linalg.LinAlgError:
        diag = np.abs(np.diag(Hm))
        diag = np.where(np.isfinite(diag) & (diag > 0), diag, 1.0)
        return np.diag(1.0 / diag)


def full_mh(loglik, prior: PriorSpec, init, n_iter: int, rng=0, burn_in: int | None = None,
            positive=None, init_cov=None, names=None, thin: int = 1,
            target: float = 0.234) -> Chain:
    """Gaussian random-walk MH on the full posterior with burn-in adaptation.

    Positive coordinates move on the log scale (Jacobian included).  During
    burn-in the proposal covariance tracks the running covariance of the
    chain and a Robbins-Monro global scale steers acceptance toward
    ``target``; both are frozen afterwards.  ``Chain.acceptance_rate`` is
    over all iterations; the post-burn-in rate is in
    ``chain.config["post_burn_in_acceptance"]``.
    """
    theta0 = np.asarray(init, dtype=np.float64)
    d = theta0.size
    positive = np.zeros(d, dtype=bool) if positive is None else np.asarray(positive, dtype=bool)
    burn_in = n_iter // 5 if burn_in is None else int(burn_in)
    if not 0 <= burn_in < n_iter:
        raise ValueError("burn_in must lie in [0, n_iter)")
    names = tuple(names) if names is not None else tuple(f"theta{i}" for i in range(d))

    def to_theta(x):
        t = x.copy()
        t[positive] = np.exp(x[positive])
        return t

    def logpost(x):
        t = to_theta(x)
        lp = prior.logpdf(t)
        if not math.isfinite(lp):
            return -math.inf
        ll = loglik(t)
        if not math.isfinite(ll):
            return -math.inf
        return ll + lp + float(x[positive].sum())

    x = theta0.copy()
    x[positive] = np.log(theta0[positive])
    cur = logpost(x)
    if not math.isfinite(cur):
        raise ValueError("log posterior is not finite at the initial value")

    stream = rng if isinstance(rng, RngStream) else None
    if stream is not None:
        g_prop, g_acc = stream.child("proposal").generator(), stream.child("accept").generator()
    else:
        g_prop = g_acc = as_generator(rng)
    Z = g_prop.standard_normal((n_iter, d))
    log_u = np.log(g_acc.random(n_iter))

    base = laplace_cov(logpost, x) if init_cov is None else np.asarray(init_cov, dtype=np.float64)
    opt = 2.38 ** 2 / d
    log_lam = 0.0
    cov = base.copy()
    L = np.linalg.cholesky(opt * cov)
    mean_run = x.copy()
    m2_run = np.zeros((d, d))
    n_run = 1

    n_keep = len(range(burn_in, n_iter, thin))
    draws = np.empty((n_keep, d))
    accepted = post_acc = kept = 0
    for i in range(n_iter):
        prop = x + math.exp(log_lam) * (L @ Z[i])
        new = logpost(prop)
        log_a = min(0.0, new - cur) if math.isfinite(new) else -math.inf
        acc = log_u[i] <= log_a
        if acc:
            x, cur = prop, new
            accepted += 1
            if i >= burn_in:
                post_acc += 1
        if i < burn_in:
            log_lam += (math.exp(log_a) - target) / (i + 1) ** 0.6
            n_run += 1
            delta = x - mean_run
            mean_run += delta / n_run
            m2_run += np.outer(delta, x - mean_run)
            if i >= 200 and i % 50 == 0:
                emp = m2_run / (n_run - 1) + 1e-10 * np.eye(d)
                try:
                    L = np.linalg.cholesky(opt * emp)
                    cov = emp
                except np.linalg.LinAlgError:
                    pass
        if i >= burn_in and (i - burn_in) % thin == 0:
            draws[kept] = to_theta(x)
            kept += 1
    rate = accepted / n_iter
    post_rate = post_acc / (n_iter - burn_in)
    if post_rate < 1e-4:
        warnings.warn(f"MH acceptance rate {post_rate:.2e} is below 1e-4", StuckChainWarning,
                      stacklevel=2)
    conf = {"n_iter": n_iter, "burn_in": burn_in, "thin": thin, "target": target,
            "post_burn_in_acceptance": post_rate, "scale_factor": math.exp(log_lam),
            "proposal_cov": (opt * math.exp(2 * log_lam) * cov).tolist()}
    return Chain(draws, rate, accepted, n_iter, names, None, conf)


# ---------------------------------------------------------------------------
# empirical likelihood
# ---------------------------------------------------------------------------

def hull_interior(psi, tol: float = 1e-10) -> bool:
    """Whether zero lies strictly inside the convex hull of the rows of ``psi``.

    Solves the LP ``max t`` subject to ``p_i >= t``, ``sum p = 1`` and
    ``sum p_i psi_i = 0``; zero is interior iff the optimum is positive.
    """
    psi = np.asarray(psi, dtype=np.float64)
    n, d = psi.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.zeros((d + 1, n + 1))
    A_eq[:d, :n] = psi.T
    A_eq[d, :n] = 1.0
    b_eq = np.zeros(d + 1)
    b_eq[d] = 1.0
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b_eq,
                           bounds=[(0, None)] * n + [(None, 1.0 / n)], method="highs")
    return bool(res.status == 0 and -res.fun > tol)


def hull_interior_2d(psi) -> np.ndarray:
    """Vectorised interior test for stacks of planar point sets, shape ``(B, n, 2)``.

    Zero is interior iff the nonzero points leave no angular gap of at
    least pi around the origin.
    """
    psi = np.asarray(psi, dtype=np.float64)
    ang = np.arctan2(psi[..., 1], psi[..., 0])
    zero = (psi[..., 0] == 0.0) & (psi[..., 1] == 0.0)
    ang = np.where(zero, np.nan, ang)
    ang = np.sort(ang, axis=-1)  # nan last
    count = (~zero).sum(axis=-1)
    gaps = np.diff(ang, axis=-1)
    gaps = np.where(np.isnan(gaps), -np.inf, gaps)
    first = ang[..., 0]
    last = np.take_along_axis(ang, np.maximum(count - 1, 0)[..., None], axis=-1)[..., 0]
    wrap = 2.0 * np.pi - (last - first)
    max_gap = np.maximum(gaps.max(axis=-1, initial=-np.inf), wrap)
    return (count >= 3) & (max_gap < np.pi - 1e-12)


def _newton_check(psi_b, W, eta, conv):
    n = psi_b.shape[1]
    x = 1.0 + np.einsum("bnd,bd->bn", psi_b, eta)
    # stationarity and feasibility decide success; near the hull boundary
    # Newton may exhaust its budget while already at the optimum
    ok = np.all(x >= 1.0 / n * (1 - 1e-9), axis=1)
    grad = np.einsum("bnd,bn->bd", psi_b, 1.0 / np.where(x > 0, x, np.nan))
    scale = np.abs(psi_b).sum(axis=1) + 1.0
    ok &= np.all(np.abs(grad) <= 1e-6 * scale, axis=1)
    return ok


def el_wstat_batch(psi, hull=None) -> np.ndarray:
    """``W_E`` for a stack ``(B, n, d)``; ``+inf`` where zero is not interior.

    ``hull`` is an optional precomputed boolean interior mask.
    """
    psi = np.asarray(psi, dtype=np.float64)
    B, n, d = psi.shape
    if hull is None:
        hull = hull_interior_2d(psi) if d == 2 else np.array([hull_interior(p) for p in psi])
    out = np.full(B, np.inf)
    idx = np.flatnonzero(hull)
    if idx.size:
        W, eta, conv = kernels.el_batch(psi[idx], max_iter=200)
        ok = _newton_check(psi[idx], W, eta, conv)
        if not ok.all():
            bad = idx[~ok]
            raise NewtonFailure(f"EL multiplier Newton failed for {bad.size} of {idx.size} cells")
        out[idx] = np.maximum(W, 0.0)
    return out


def el_wstat_units(psi) -> float:
    """``W_E = 2 sum log(1 + eta' psi_i)`` from unit contributions ``(n, d)``.

    Returns ``+inf`` when zero is not strictly inside the convex hull of
    the ``psi_i`` (decided by LP feasibility).
    """
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    n, d = psi.shape
    if n < d + 1:
        raise ValueError("need at least d + 1 units")
    if not hull_interior(psi):
        return math.inf
    return float(el_wstat_batch(psi[None], hull=np.array([True]))[0])


def el_wstat(y, theta, tc: TuningConstants = TuningConstants()) -> float:
    """Empirical-likelihood statistic of the toy Huber equations at ``theta``."""
    return el_wstat_units(toy_psi_units(y, theta, tc))


# ---------------------------------------------------------------------------
# grid posteriors for the toy model
# ---------------------------------------------------------------------------

@dataclass
class GridPosterior:
    """Posterior tabulated on a rectangular grid.

    ``log_density`` is normalised so that ``exp(log_density).sum() * dA == 1``
    with ``dA`` the cell area.
    """

    axes: tuple
    log_density: np.ndarray
    names: tuple = ("mu", "sigma")
    kind: str = ""

    @property
    def steps(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def total_mass(self) -> float:
        dx, dy = self.steps
        return float(self.density.sum() * dx * dy)

    def boundary_mass(self) -> float:
        p = self.density
        inner = p[1:-1, 1:-1].sum()
        dx, dy = self.steps
        return float((p.sum() - inner) * dx * dy)

    def _axis(self, k):
        return self.names.index(k) if isinstance(k, str) else int(k)

    def marginal(self, k):
        """``(x, density)`` of the marginal on axis ``k``."""
        k = self._axis(k)
        other = 1 - k
        dens = self.density.sum(axis=other) * self.steps[other]
        return self.axes[k], dens

    def mean(self, k) -> float:
        x, p = self.marginal(k)
        return float(np.trapezoid(x * p, x) / np.trapezoid(p, x))

    def cdf(self, k):
        x, p = self.marginal(k)
        c = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
        return x, c / c[-1]

    def quantile(self, k, q):
        x, c = self.cdf(k)
        keep = np.concatenate([[True], np.diff(c) > 0])
        return np.interp(q, c[keep], x[keep])

    def mode(self) -> np.ndarray:
        i, j = np.unravel_index(np.argmax(self.log_density), self.log_density.shape)
        return np.array([self.axes[0][i], self.axes[1][j]])

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.names[0], self.names[1], "density"])
            p = self.density
            for i, a in enumerate(self.axes[0]):
                for j, b in enumerate(self.axes[1]):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(p[i, j]))])


def _log_axis_prior(comp, x):
    return np.array([comp.logpdf(float(v)) for v in x])


def _genuine_table(y, mu_ax, sg_ax):
    n = y.size
    s1, s2 = y.sum(), float(y @ y)
    mu = mu_ax[:, None]
    sg = sg_ax[None, :]
    ss = s2 - 2.0 * mu * s1 + n * mu * mu
    return -n * np.log(sg) - ss / (2.0 * sg * sg)


def _el_table(y, mu_ax, sg_ax, tc):
    M, S = np.meshgrid(mu_ax, sg_ax, indexing="ij")
    z = (y[None, None, :] - M[..., None]) / S[..., None]
    psi = np.stack([huber_psi(z, tc.c1), huber_psi(z, tc.c2) ** 2 - consistency_k(tc.c2)], axis=-1)
    psi = psi.reshape(-1, y.size, 2)
    W = el_wstat_batch(psi)
    return (-0.5 * W).reshape(M.shape)


def grid_posterior(kind: str, y, prior: PriorSpec | None = None,
                   tc: TuningConstants = TuningConstants(), n_grid: int = 201,
                   half_width: float = 6.0, center=None, se=None, auto_widen: bool = False,
                   max_widen: int = 4, boundary_tol: float = 1e-3) -> GridPosterior:
    """Toy-model posterior tabulated on a ``n_grid x n_grid`` grid.

    ``kind="genuine"`` uses the normal likelihood and centres the grid at
    the MLE with its asymptotic standard errors.  ``kind="empirical_likelihood"``
    uses ``exp(-W_E/2)`` and centres at the Huber estimate with sandwich
    standard errors.  Either can be overridden through ``center``/``se``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    prior = PriorSpec.toy() if prior is None else prior
    if kind == "genuine":
        c0 = np.array([y.mean(), y.std()]) if center is None else np.asarray(center, float)
        s0 = (np.array([c0[1] / math.sqrt(n), c0[1] / math.sqrt(2 * n)])
              if se is None else np.asarray(se, float))
    elif kind in ("empirical_likelihood", "el"):
        kind = "empirical_likelihood"
        tt = toy_solve(y, tc).as_array() if center is None else np.asarray(center, float)
        c0 = tt
        if se is None:
            H, J = toy_analytic_HJ(tt, tc, n)
            K, _ = sandwich(H, J)
            s0 = np.sqrt(np.diag(K))
        else:
            s0 = np.asarray(se, float)
    else:
        raise ValueError(f"unknown grid posterior kind {kind!r}")

    width = half_width
    for attempt in range(max_widen + 1):
        mu_ax = np.linspace(c0[0] - width * s0[0], c0[0] + width * s0[0], n_grid)
        lo = max(c0[1] - width * s0[1], c0[1] * 1e-3)
        sg_ax = np.linspace(lo, c0[1] + width * s0[1], n_grid)
        if kind == "genuine":
            loglik = _genuine_table(y, mu_ax, sg_ax)
        else:
            loglik = _el_table(y, mu_ax, sg_ax, tc)
        logp = (loglik + _log_axis_prior(prior.components[0], mu_ax)[:, None]
                + _log_axis_prior(prior.components[1], sg_ax)[None, :])
        top = np.max(logp)
        if not math.isfinite(top):
            raise GridTooNarrow("posterior has no mass on the grid")
        area = (mu_ax[1] - mu_ax[0]) * (sg_ax[1] - sg_ax[0])
        logp = logp - top
        logp -= math.log(np.exp(logp).sum() * area)
        gp = GridPosterior((mu_ax, sg_ax), logp, kind=kind)
        bm = gp.boundary_mass()
        if bm <= boundary_tol:
            return gp
        if not auto_widen or attempt == max_widen:
            raise GridTooNarrow(f"{bm:.2e} of the posterior mass lies on boundary cells")
        width *= 1.5
    raise AssertionError("unreachable")
