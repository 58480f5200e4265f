"""ABC-MCMC with a rescaled robust estimating function as the summary statistic.

The summary of a dataset ``y*`` is ``B_R^{-1} b' {a(y, theta~) - a(y*, theta~)}``
with ``theta~`` the observed M-estimate and ``B_R B_R' = J(theta~)``.  The
consistency correction cancels in the difference, so it is evaluated once
(only for the optional cross-check).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import CalibrationFailed, PriorUnsupported, StuckChainWarning
from .estfun import EstimatingFunctionModel
from .godambe import MEstimate
from .numerics import RngStream, as_generator, matrix_sqrt
from .priors import PriorSpec


@dataclass
class SummaryContext:
    model: EstimatingFunctionModel
    theta_tilde: np.ndarray
    B_R: np.ndarray
    a_obs: np.ndarray
    K: np.ndarray
    y_obs: np.ndarray | None = field(default=None, repr=False)
    B_R_inv: np.ndarray = field(init=False, repr=False)
    b_t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.theta_tilde.size
        self.B_R_inv = linalg.solve_triangular(self.B_R, np.eye(d), lower=True)
        self.b_t = self.model.b_matrix(self.theta_tilde).T

    @classmethod
    def build(cls, model: EstimatingFunctionModel, y, mest: MEstimate, tol: float = 1e-6):
        """Context for observed ``y``; ``theta~`` must be a root, checked as
        ``|B_R^{-1} Psi(y; theta~)| <= tol``.  Equations of coordinates on
        the support boundary (``model.boundary``) are left out of the check."""
        theta = np.asarray(mest.theta_tilde, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ctx = cls(model, theta, np.asarray(mest.B_R), model.data_part(y, theta),
                  np.asarray(mest.K), y)
        psi = model.psi(y, theta)
        psi[model.boundary(theta)] = 0.0
        resid = linalg.solve_triangular(ctx.B_R, psi, lower=True)
        if np.abs(resid).max() > tol:
            raise ValueError("theta_tilde is not a root of the estimating equation on y")
        return ctx


def summary_stat(ctx: SummaryContext, y_star, check: bool = False) -> np.ndarray:
    """Rescaled summary of ``y_star`` from data-part differences.

    With ``check`` the direct route ``B_R^{-1}(Psi(y) - Psi(y*))``, which
    includes the consistency correction, is evaluated too and must agree.
    """
    a_star = ctx.model.data_part(y_star, ctx.theta_tilde)
    eta = ctx.B_R_inv @ (ctx.b_t @ (ctx.a_obs - a_star))
    if check:
        direct = summary_stat_direct(ctx, y_star)
        scale = max(1.0, np.abs(ctx.a_obs).max(), np.abs(a_star).max())
        if np.abs(direct - eta).max() > 1e-10 * scale:
            raise AssertionError("data-part summary disagrees with the direct estimating-function route")
    return eta


def summary_stat_direct(ctx: SummaryContext, y_star) -> np.ndarray:
    """``B_R^{-1}(Psi(y; theta~) - Psi(y*; theta~))`` with the full correction.

    Both terms are recomputed from the data when the context holds the
    observed sample; otherwise ``Psi(y)`` is rebuilt from the stored data part.
    """
    t = ctx.theta_tilde
    m = ctx.model
    if ctx.y_obs is not None:
        psi_obs = m.psi(ctx.y_obs, t)
    else:
        psi_obs = ctx.b_t @ ctx.a_obs - m.correction_part(t)
    psi_star = m.psi(y_star, t)
    return linalg.solve_triangular(ctx.B_R, psi_obs - psi_star, lower=True)


def kernel_log(eta, h: float) -> float:
    """Log density of ``N_d(0, h I_d)`` at ``eta``."""
    eta = np.atleast_1d(np.asarray(eta, dtype=np.float64))
    d = eta.size
    return -0.5 * d * math.log(2.0 * math.pi * h) - float(eta @ eta) / (2.0 * h)


@dataclass
class AbcrConfig:
    """Sampler settings.  ``h`` is the kernel variance (covariance ``h I_d``).

    ``proposal_scale`` is the t-proposal scale on the sampler's working
    scale (log for positive coordinates); when None it is
    ``scale_multiplier * D K D`` with ``D`` the log-transform Jacobian at
    ``theta~`` and ``scale_multiplier`` defaulting to ``2.38^2 / d``.
    """

    h: float
    n_iter: int
    burn_in: int = 0
    thin: int = 1
    proposal_scale: np.ndarray | None = None
    proposal_df: int = 5
    scale_multiplier: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.n_iter < 1 or self.thin < 1:
            raise ValueError("n_iter and thin must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must lie in [0, n_iter)")

    def to_dict(self):
        out = asdict(self)
        if self.proposal_scale is not None:
            out["proposal_scale"] = np.asarray(self.proposal_scale).tolist()
        return out


@dataclass
class Chain:
    draws: np.ndarray
    acceptance_rate: float
    accepted: int
    n_iter: int
    names: tuple
    summary_norms: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.draws.shape[0] == 0:
            raise ValueError("chain has no retained draws")

    def column(self, name) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


def _to_working(theta, positive):
    x = np.array(theta, dtype=np.float64)
    x[positive] = np.log(x[positive])
    return x


def _from_working(x, positive):
    t = np.array(x, dtype=np.float64)
    t[positive] = np.exp(t[positive])
    return t


def working_scale(K, theta, positive, max_log_sd: float = 1.0) -> np.ndarray:
    """Delta-method covariance of ``K`` on the log scale for positive coordinates.

    Log-scale standard deviations are capped at ``max_log_sd`` with
    correlations kept; an estimate near zero would otherwise give an
    arbitrarily wide proposal.
    """
    D = np.ones(theta.size)
    D[positive] = 1.0 / np.asarray(theta)[positive]
    sd = np.sqrt(np.diag(K)) * D
    shrink = np.where(positive & (sd > max_log_sd), max_log_sd / np.where(sd > 0, sd, 1.0), 1.0)
    D *= shrink
    return K * np.outer(D, D)


def abcr_mcmc(model: EstimatingFunctionModel, prior: PriorSpec, ctx: SummaryContext,
              cfg: AbcrConfig, rng=None, keep_norms: bool = True) -> Chain:
    """Run the ABC-R Metropolis-Hastings chain.

    Starts at ``theta~`` with the summary of one fresh simulation there.
    Each step proposes from a symmetric multivariate t random walk on the
    working scale, simulates a dataset, and accepts with probability
    ``K_h(eta*)/K_h(eta) * pi(theta*) J(theta*) / (pi(theta) J(theta))``
    where ``J`` is the log-transform Jacobian.  The current summary is
    carried along with the current state.
    """
    stream = rng if rng is not None else RngStream(cfg.seed)
    if isinstance(stream, RngStream):
        g_prop, g_sim, g_acc = (stream.child(k).generator() for k in ("proposal", "simulate", "accept"))
    else:
        g_prop = g_sim = g_acc = as_generator(stream)

    positive = model.positive
    theta = ctx.theta_tilde.copy()
    d = theta.size
    lp = prior.logpdf(theta)
    if not math.isfinite(lp):
        raise PriorUnsupported("prior density is zero at the starting value")
    lp += float(np.log(theta[positive]).sum())

    if cfg.proposal_scale is not None:
        scale = np.asarray(cfg.proposal_scale, dtype=np.float64)
    else:
        mult = cfg.scale_multiplier if cfg.scale_multiplier is not None else 2.38 ** 2 / d
        scale = mult * working_scale(ctx.K, theta, positive)
    L = matrix_sqrt(scale)
    n = cfg.n_iter
    steps = g_prop.standard_normal((n, d)) @ L.T
    steps *= np.sqrt(cfg.proposal_df / g_prop.chisquare(cfg.proposal_df, size=n))[:, None]
    log_u = np.log(g_acc.random(n))

    B_inv_bt = ctx.B_R_inv @ ctx.b_t
    a_obs = ctx.a_obs
    tt = ctx.theta_tilde
    inv2h = 1.0 / (2.0 * cfg.h)

    eta = B_inv_bt @ (a_obs - model.data_part(model.simulate(theta, g_sim), tt))
    dist = float(eta @ eta)
    x = _to_working(theta, positive)

    n_keep = len(range(cfg.burn_in, n, cfg.thin))
    draws = np.empty((n_keep, d))
    norms = np.empty(n) if keep_norms else None
    accepted = 0
    kept = 0
    for i in range(n):
        x_new = x + steps[i]
        theta_new = x_new.copy()
        theta_new[positive] = np.exp(x_new[positive])
        lp_new = prior.logpdf(theta_new)
        if math.isfinite(lp_new):
            lp_new += float(x_new[positive].sum())
            e_new = B_inv_bt @ (a_obs - model.data_part(model.simulate(theta_new, g_sim), tt))
            dist_new = float(e_new @ e_new)
            if log_u[i] <= (dist - dist_new) * inv2h + lp_new - lp:
                x, theta, lp, dist = x_new, theta_new, lp_new, dist_new
                accepted += 1
        if keep_norms:
            norms[i] = math.sqrt(dist)
        if i >= cfg.burn_in and (i - cfg.burn_in) % cfg.thin == 0:
            draws[kept] = theta
            kept += 1
    rate = accepted / n
    if rate < 1e-4:
        warnings.warn(f"ABC-R chain acceptance rate {rate:.2e} is below 1e-4", StuckChainWarning,
                      stacklevel=2)
    conf = cfg.to_dict()
    conf["proposal_scale_used"] = scale.tolist()
    return Chain(draws, rate, accepted, n, tuple(model.names), norms, conf)


def calibrate_h(model, prior, ctx, pilot_cfg: AbcrConfig, target_rate: float = 0.01,
                rng=None, grid=None, return_table: bool = False, max_bisect: int = 12):
    """Choose the kernel variance ``h`` giving roughly ``target_rate`` acceptance.

    Runs a pilot chain per point of a log-spaced grid (default 15 points
    over ``[1e-4, 10] * d``), interpolates log h against the monotone
    envelope of the acceptance curve, and bisects between the bracketing
    grid points until a pilot lands in ``[target/2, 2 target]``.
    """
    if not 0 < target_rate < 0.5:
        raise ValueError("target_rate must lie in (0, 0.5)")
    if pilot_cfg.n_iter < 2000:
        raise ValueError("pilot chains need at least 2000 iterations")
    stream = rng if rng is not None else RngStream(pilot_cfg.seed)
    if not isinstance(stream, RngStream):
        stream = RngStream(int(as_generator(stream).integers(2**63)))
    d = ctx.theta_tilde.size
    if grid is None:
        grid = np.logspace(-4, 1, 15) * d
    grid = np.asarray(grid, dtype=np.float64)
    lo_ok, hi_ok = 0.5 * target_rate, 2.0 * target_rate

    counter = [0]

    def pilot(h):
        cfg = AbcrConfig(h=float(h), n_iter=pilot_cfg.n_iter, proposal_df=pilot_cfg.proposal_df,
                         proposal_scale=pilot_cfg.proposal_scale,
                         scale_multiplier=pilot_cfg.scale_multiplier)
        counter[0] += 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StuckChainWarning)
            ch = abcr_mcmc(model, prior, ctx, cfg, stream.child(f"pilot{counter[0]}"),
                           keep_norms=False)
        return ch.acceptance_rate

    rates = np.array([pilot(h) for h in grid])
    table = [(float(h), float(r)) for h, r in zip(grid, rates)]
    env = np.maximum.accumulate(rates)
    above = np.flatnonzero(env >= target_rate)
    if above.size == 0:
        raise CalibrationFailed(f"no grid point reaches acceptance {target_rate}; max was {rates.max():.4f}")
    j = int(above[0])
    if j == 0:
        if lo_ok <= rates[0] <= hi_ok:
            return (float(grid[0]), table) if return_table else float(grid[0])
        raise CalibrationFailed("acceptance already exceeds the target at the smallest h")
    lo, hi = math.log(grid[j - 1]), math.log(grid[j])
    r_lo, r_hi = env[j - 1], env[j]
    frac = (target_rate - r_lo) / (r_hi - r_lo) if r_hi > r_lo else 0.5
    logh = lo + frac * (hi - lo)
    for _ in range(max_bisect):
        r = pilot(math.exp(logh))
        table.append((math.exp(logh), float(r)))
        if lo_ok <= r <= hi_ok:
            h = math.exp(logh)
            return (h, table) if return_table else h
        if r < target_rate:
            lo = logh
        else:
            hi = logh
        logh = 0.5 * (lo + hi)
    raise CalibrationFailed(f"bisection did not reach acceptance in [{lo_ok}, {hi_ok}]")
