"""Two-component nested Gaussian linear mixed model.

Each group ``j`` of size ``m`` has covariance ``V_j = s1 * 11' + s2 * I``
with ``s1 = sigma1^2`` (random intercept) and ``s2 = sigma2^2`` (residual).
``V_j`` depends on the group only through ``m``, and every quantity used
here has a closed form in terms of group sums, so nothing larger than
``q x q`` is ever factorised.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import kernels
from .errors import NoConvergence, RankDeficientX, SingularV, VarianceFloorWarning
from .estfun import EstimatingFunctionModel, TuningConstants, consistency_k, huber_weight
from .numerics import as_generator
from .toy import ContaminationSpec


class LmmDesign:
    """Grouped fixed-effect design with rows ordered group by group."""

    def __init__(self, X, sizes, labels=None, column_names=None):
        X = np.ascontiguousarray(X, dtype=np.float64)
        sizes = np.asarray(sizes, dtype=np.int64)
        if X.ndim != 2 or sizes.sum() != X.shape[0]:
            raise ValueError("group sizes must add up to the number of rows of X")
        if np.any(sizes < 1):
            raise ValueError("empty group")
        if len(sizes) < 2 or sizes.max() < 2:
            raise ValueError("need at least two groups and one group with two or more rows")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise RankDeficientX("fixed-effect design is not of full column rank")
        self.X = X
        self.sizes = sizes
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.labels = tuple(labels) if labels is not None else tuple(range(len(sizes)))
        q = X.shape[1]
        self.column_names = tuple(column_names) if column_names is not None else tuple(
            f"alpha{i}" for i in range(q))
        self.XtX = X.T @ X
        # per-group column sums S_j and cross products X_j'X_j
        self.S = np.add.reduceat(X, self.starts, axis=0)
        self.XtX_g = np.add.reduceat(np.einsum("ni,nj->nij", X, X), self.starts, axis=0)
        self.size_classes = {}
        for m in np.unique(sizes):
            sel = sizes == m
            Sm = self.S[sel]
            self.size_classes[int(m)] = (int(sel.sum()), Sm.T @ Sm / m)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def g(self) -> int:
        return self.sizes.shape[0]

    def blocks(self):
        for a, m in zip(self.starts, self.sizes):
            yield self.X[a:a + m]

    def permuted(self, order) -> "LmmDesign":
        """Same design with groups reordered; returns ``(design, row_index)``."""
        order = np.asarray(order)
        rows = np.concatenate([np.arange(self.starts[j], self.starts[j] + self.sizes[j])
                               for j in order])
        d = LmmDesign(self.X[rows], self.sizes[order], [self.labels[j] for j in order],
                      self.column_names)
        return d, rows

    @classmethod
    def from_blocks(cls, blocks, labels=None, column_names=None) -> "LmmDesign":
        blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks]
        return cls(np.vstack(blocks), [b.shape[0] for b in blocks], labels, column_names)

    @classmethod
    def nested(cls, g: int, q: int) -> "LmmDesign":
        """Balanced one-way layout: ``g`` units each observed once at ``q`` levels.

        Columns are an intercept and ``q - 1`` treatment dummies (level 0 is
        the reference).
        """
        block = np.zeros((q, q))
        block[:, 0] = 1.0
        block[np.arange(1, q), np.arange(1, q)] = 1.0
        names = ["intercept"] + [f"level{j}" for j in range(1, q)]
        return cls(np.tile(block, (g, 1)), np.full(g, q), None, names)


@dataclass(frozen=True)
class LmmTheta:
    alpha: np.ndarray
    sigma1_sq: float
    sigma2_sq: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        if not (self.sigma1_sq > 0 and self.sigma2_sq > 0):
            raise ValueError("variance components must be positive")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.alpha, [self.sigma1_sq, self.sigma2_sq]])

    @classmethod
    def from_array(cls, a) -> "LmmTheta":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:-2].copy(), float(a[-2]), float(a[-1]))


def _split(theta):
    if isinstance(theta, LmmTheta):
        return theta.alpha, theta.sigma1_sq, theta.sigma2_sq
    a = np.asarray(theta, dtype=np.float64)
    return a[:-2], float(a[-2]), float(a[-1])


def _check_var(s1, s2):
    if not (s1 > 0 and s2 > 0) or not (math.isfinite(s1) and math.isfinite(s2)):
        raise SingularV(f"variance components must be positive, got ({s1}, {s2})")


# ---------------------------------------------------------------------------
# dense per-block matrices (diagnostics and tests)
# ---------------------------------------------------------------------------

@dataclass
class GroupMatrices:
    """Dense ``V``, ``V^{-1}`` and symmetric ``V^{-1/2}`` for a block of size ``m``."""

    m: int
    V: np.ndarray
    V_inv: np.ndarray
    V_inv_sqrt: np.ndarray


def group_matrices(m: int, s1: float, s2: float) -> GroupMatrices:
    _check_var(s1, s2)
    one = np.full((m, m), 1.0 / m)
    I = np.eye(m)
    tau2 = s2 + m * s1
    V = s1 * m * one + s2 * I
    V_inv = (I - one) / s2 + one / tau2
    V_inv_sqrt = (I - one) / math.sqrt(s2) + one / math.sqrt(tau2)
    return GroupMatrices(m, V, V_inv, V_inv_sqrt)


# ---------------------------------------------------------------------------
# likelihoods and simulation
# ---------------------------------------------------------------------------

def lmm_loglik(y, design: LmmDesign, theta) -> float:
    """Gaussian log-likelihood, including the ``-(n/2) log(2 pi)`` constant."""
    alpha, s1, s2 = _split(theta)
    _check_var(s1, s2)
    e = np.asarray(y, dtype=np.float64) - design.X @ alpha
    return kernels.lmm_loglik(e, design.starts, design.sizes, s1, s2)


def _gls_matrix(design: LmmDesign, s1, s2, power: int = 1):
    """``sum_j X_j' V_j^{-power} X_j`` for power 1 or 2."""
    W = design.XtX / s2 ** power
    for m, (_, G) in design.size_classes.items():
        tau2 = s2 + m * s1
        W = W - G / s2 ** power + G / tau2 ** power
    return W


def _whiten(design: LmmDesign, v, s1, s2):
    """Apply the symmetric ``V^{-1/2}`` blockwise to a vector or matrix."""
    sizes = design.sizes
    tau = np.sqrt(s2 + sizes * s1)
    vbar = np.add.reduceat(v, design.starts, axis=0) / (
        sizes[:, None] if v.ndim == 2 else sizes)
    shift = vbar / (tau[:, None] if v.ndim == 2 else tau) - vbar / math.sqrt(s2)
    return v / math.sqrt(s2) + np.repeat(shift, sizes, axis=0)


def lmm_reml_loglik(y, design: LmmDesign, s1: float, s2: float) -> float:
    """Restricted log-likelihood profiled over the fixed effects."""
    _check_var(s1, s2)
    y = np.asarray(y, dtype=np.float64)
    M = _gls_matrix(design, s1, s2)
    Xw = _whiten(design, design.X, s1, s2)
    yw = _whiten(design, y, s1, s2)
    alpha = np.linalg.solve(M, Xw.T @ yw)
    e = y - design.X @ alpha
    sign, logdetM = np.linalg.slogdet(M)
    ll = kernels.lmm_loglik(e, design.starts, design.sizes, s1, s2)
    return ll - 0.5 * logdetM + 0.5 * design.q * math.log(2.0 * math.pi)


def lmm_reml_fit(y, design: LmmDesign) -> LmmTheta:
    """Classical REML estimate by direct maximisation over log-variances."""
    y = np.asarray(y, dtype=np.float64)
    start = _moment_start(y, design, 1e-6)
    x0 = np.log([start[1], start[2]])
    res = optimize.minimize(lambda x: -lmm_reml_loglik(y, design, *np.exp(x)), x0,
                            method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    s1, s2 = np.exp(res.x)
    M = _gls_matrix(design, s1, s2)
    alpha = np.linalg.solve(M, _whiten(design, design.X, s1, s2).T @ _whiten(design, y, s1, s2))
    return LmmTheta(alpha, float(s1), float(s2))


def lmm_simulate(theta, design: LmmDesign, cont: ContaminationSpec = ContaminationSpec(),
                 rng=0) -> np.ndarray:
    """Groupwise draws; a group is drawn with covariance ``inflation * V_j``
    with probability ``epsilon``."""
    alpha, s1, s2 = _split(theta)
    gen = as_generator(rng)
    hit = gen.random(design.g) < cont.epsilon
    b = gen.standard_normal(design.g)
    eps = gen.standard_normal(design.n)
    scale = np.where(hit, math.sqrt(cont.inflation), 1.0)
    return (design.X @ alpha + np.repeat(scale * math.sqrt(s1) * b, design.sizes)
            + np.repeat(scale, design.sizes) * math.sqrt(s2) * eps)


# ---------------------------------------------------------------------------
# robust REML II estimating equations
# ---------------------------------------------------------------------------

def reml2_correction(design: LmmDesign, s1: float, s2: float, k: float) -> np.ndarray:
    """Consistency term ``(0_q, k/2 tr(P Z1 Z1'), k/2 tr(P))``."""
    M = _gls_matrix(design, s1, s2)
    N = _gls_matrix(design, s1, s2, power=2)
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise RankDeficientX("X' V^-1 X is singular") from None
    tr1 = 0.0
    trV = 0.0
    for m, (count, G) in design.size_classes.items():
        tau2 = s2 + m * s1
        tr1 += count * m / tau2 - m * np.sum(Minv * G) / tau2 ** 2
        trV += count * ((m - 1) / s2 + 1.0 / tau2)
    trP = trV - np.sum(Minv * N)
    out = np.zeros(design.q + 2)
    out[-2] = 0.5 * k * tr1
    out[-1] = 0.5 * k * trP
    return out


def _group_corrections(design: LmmDesign, s1, s2, k):
    """Per-group shares of :func:`reml2_correction`, shape ``(g, q + 2)``."""
    M = _gls_matrix(design, s1, s2)
    Minv = np.linalg.inv(M)
    m = design.sizes.astype(np.float64)
    tau2 = s2 + m * s1
    S = design.S
    SMS = np.einsum("gi,ij,gj->g", S, Minv, S)
    sh1 = m / tau2 - SMS / tau2 ** 2
    SS = np.einsum("gi,gj->gij", S, S) / m[:, None, None]
    Ng = (design.XtX_g - SS) / s2 ** 2 + SS / (tau2 ** 2)[:, None, None]
    shP = (m - 1) / s2 + 1.0 / tau2 - np.einsum("ij,gji->g", Minv, Ng)
    out = np.zeros((design.g, design.q + 2))
    out[:, -2] = 0.5 * k * sh1
    out[:, -1] = 0.5 * k * shP
    return out


def reml2_data_part(y, design: LmmDesign, theta, tc: TuningConstants) -> np.ndarray:
    alpha, s1, s2 = _split(theta)
    _check_var(s1, s2)
    e = np.asarray(y, dtype=np.float64) - design.X @ alpha
    t = kernels.lmm_group_terms(e, design.starts, design.sizes, design.X, s1, s2,
                                tc.c1, tc.c2).sum(axis=0)
    t[-2:] *= 0.5
    return t


def robust_reml2_psi(y, design: LmmDesign, theta, tc: TuningConstants = TuningConstants()):
    """Robust REML II estimating function, a ``(q + 2)``-vector."""
    _, s1, s2 = _split(theta)
    return reml2_data_part(y, design, theta, tc) - reml2_correction(
        design, s1, s2, consistency_k(tc.c2))


def lmm_psi_units(y, design: LmmDesign, theta, tc: TuningConstants = TuningConstants()):
    """Per-group contributions to :func:`robust_reml2_psi`."""
    alpha, s1, s2 = _split(theta)
    _check_var(s1, s2)
    e = np.asarray(y, dtype=np.float64) - design.X @ alpha
    t = kernels.lmm_group_terms(e, design.starts, design.sizes, design.X, s1, s2, tc.c1, tc.c2)
    t[:, -2:] *= 0.5
    return t - _group_corrections(design, s1, s2, consistency_k(tc.c2))


@dataclass
class LmmFit:
    theta: LmmTheta
    iterations: int
    psi_norm: float
    floored: tuple = field(default_factory=tuple)

    @property
    def negative_variance_floor(self) -> bool:
        return bool(self.floored)


def _moment_start(y, design: LmmDesign, floor: float):
    alpha = np.linalg.lstsq(design.X, y, rcond=None)[0]
    e = y - design.X @ alpha
    sizes = design.sizes.astype(np.float64)
    ebar = np.add.reduceat(e, design.starts) / sizes
    within = float(np.sum((e - np.repeat(ebar, design.sizes)) ** 2))
    s2 = max(within / max(design.n - design.g, 1), floor)
    s1 = max(float(np.mean(ebar ** 2) - s2 * np.mean(1.0 / sizes)), floor)
    return alpha, s1, s2


def lmm_solve(y, design: LmmDesign, tc: TuningConstants = TuningConstants(),
              max_iter: int = 100, tol: float = 1e-7, floor: float = 1e-6,
              polish_from: float = 1e-2) -> LmmFit:
    """Root of the robust REML II equations.

    Each sweep does one Huber-weighted least-squares update of the fixed
    effects and one multiplicative rescaling towards each variance
    equation, applied to ``s2`` and to the group-mean variance ``s1 + s2/m``.  Once the residual is below ``polish_from`` each
    sweep also tries a Newton step on ``(alpha, log s)`` and keeps it when
    it shrinks the residual.  Polishing earlier can follow the flat
    direction ``s1 -> inf`` along which every equation tends to zero.  Starts from OLS and
    ANOVA-type moment estimates.
    """
    y = np.asarray(y, dtype=np.float64)
    k = consistency_k(tc.c2)
    q = design.q
    alpha, s1, s2 = _moment_start(y, design, floor)
    inv_m = float(np.mean(1.0 / design.sizes))
    floored: set[int] = set()

    def psi_at(a, v1, v2):
        return robust_reml2_psi(y, design, np.concatenate([a, [v1, v2]]), tc)

    def norm(p):
        mask = np.ones(q + 2, dtype=bool)
        for i in floored:
            mask[q + i] = False
        return float(np.abs(p[mask]).max())

    psi = psi_at(alpha, s1, s2)
    for it in range(1, max_iter + 1):
        Xw = _whiten(design, design.X, s1, s2)
        yw = _whiten(design, y, s1, s2)
        w = huber_weight(yw - Xw @ alpha, tc.c1)
        XtW = Xw.T * w
        alpha = np.linalg.solve(XtW @ Xw, XtW @ yw)

        data = reml2_data_part(y, design, np.concatenate([alpha, [s1, s2]]), tc)
        corr = reml2_correction(design, s1, s2, k)
        # rescale the group-mean variance s1 + s2/m so that s1 can leave the floor
        s1 = (s1 + s2 * inv_m) * data[-2] / corr[-2] - s2 * inv_m
        s2 = s2 * data[-1] / corr[-1]
        floored.clear()
        if s1 < floor:
            s1 = floor
            floored.add(0)
        if s2 < floor:
            s2 = floor
            floored.add(1)
        psi = psi_at(alpha, s1, s2)
        cur = norm(psi)
        if cur <= tol:
            break
        if cur > polish_from:
            continue

        # Newton polish on (alpha, log s1, log s2), floored components held fixed
        x = np.concatenate([alpha, np.log([s1, s2])])
        free = [i for i in range(q + 2) if i < q or (i - q) not in floored]
        Jac = np.empty((q + 2, len(free)))
        for col, i in enumerate(free):
            h = 1e-6 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            Jac[:, col] = (psi_at(xp[:q], *np.exp(xp[q:])) - psi_at(xm[:q], *np.exp(xm[q:]))) / (2 * h)
        rows = free
        try:
            step = np.linalg.solve(Jac[rows], -psi[rows])
        except np.linalg.LinAlgError:
            continue
        xn = x.copy()
        xn[free] += step
        if np.all(np.isfinite(xn)) and np.all(np.abs(xn[q:] - x[q:]) < 0.5):
            pn = psi_at(xn[:q], *np.exp(xn[q:]))
            if norm(pn) < cur:
                alpha, s1, s2 = xn[:q], float(np.exp(xn[q])), float(np.exp(xn[q + 1]))
                psi = pn
                if norm(psi) <= tol:
                    break
    else:
        raise NoConvergence(f"robust REML II iteration did not reach {tol:g} in {max_iter} sweeps "
                            f"(residual {norm(psi):.3g})")
    if floored:
        warnings.warn(f"variance component(s) {sorted(floored)} floored at {floor:g}",
                      VarianceFloorWarning, stacklevel=2)
    return LmmFit(LmmTheta(alpha, s1, s2), it, norm(psi),
                  tuple(("sigma1_sq", "sigma2_sq")[i] for i in sorted(floored)))


class LmmModel(EstimatingFunctionModel):
    """Nested LMM on a fixed design paired with robust REML II equations.

    The variance-component equations carry an O(1) offset at fixed theta,
    so ``J`` is estimated as a covariance rather than a raw second moment.
    """

    centered_J = True

    def __init__(self, design: LmmDesign, tc: TuningConstants = TuningConstants()):
        self.design = design
        self.tc = tc
        self.names = tuple(design.column_names) + ("sigma1_sq", "sigma2_sq")
        self.positive = np.zeros(design.q + 2, dtype=bool)
        self.positive[-2:] = True
        self._k = consistency_k(tc.c2)
        self.floor = 1e-6
        self._sd_sizes = design.sizes

    def simulate(self, theta, rng):
        gen = as_generator(rng)
        d = self.design
        alpha, s1, s2 = theta[:-2], theta[-2], theta[-1]
        b = gen.standard_normal(d.g)
        eps = gen.standard_normal(d.n)
        return d.X @ alpha + np.repeat(math.sqrt(s1) * b, d.sizes) + math.sqrt(s2) * eps

    def psi_units(self, y, theta):
        return lmm_psi_units(y, self.design, theta, self.tc)

    def data_part(self, y, theta):
        return reml2_data_part(y, self.design, theta, self.tc)

    def correction_part(self, theta):
        return reml2_correction(self.design, float(theta[-2]), float(theta[-1]), self._k)

    def solve(self, y):
        return lmm_solve(y, self.design, self.tc, floor=self.floor).theta.as_array()

    def boundary(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return self.positive & (theta <= self.floor * (1.0 + 1e-9))

    def loglik(self, y, theta) -> float:
        if theta[-2] <= 0 or theta[-1] <= 0:
            return -np.inf
        return lmm_loglik(y, self.design, theta)


# ---------------------------------------------------------------------------
# long-format data
# ---------------------------------------------------------------------------

def design_from_long(records, response: str | None = None, interaction: bool = False):
    """Build ``(y, design)`` from long-format rows.

    ``records`` is an iterable of mappings with keys ``unit_id``,
    ``response``, ``treatment_code``, ``gender_code`` and ``value``.  The
    smallest treatment code is the reference level; gender code 0 is the
    reference.  With ``interaction`` the design is ``[X_i, w_i X_i]``.
    """
    rows = [r for r in records if response is None or str(r["response"]) == str(response)]
    if not rows:
        raise ValueError(f"no rows for response {response!r}")
    levels = sorted({int(float(r["treatment_code"])) for r in rows})
    ref = levels[0]
    units: dict = {}
    for r in rows:
        units.setdefault(str(r["unit_id"]), []).append(r)

    def unit_key(u):
        try:
            return (0, float(u))
        except ValueError:
            return (1, u)

    labels = sorted(units, key=unit_key)
    base_names = ["intercept"] + [f"trt{lv}" for lv in levels[1:]]
    names = base_names + ([f"gender:{nm}" for nm in base_names] if interaction else [])
    blocks, ys = [], []
    for u in labels:
        urows = sorted(units[u], key=lambda r: int(float(r["treatment_code"])))
        block = np.zeros((len(urows), len(names)))
        for i, r in enumerate(urows):
            lv = int(float(r["treatment_code"]))
            block[i, 0] = 1.0
            if lv != ref:
                block[i, levels.index(lv)] = 1.0
            if interaction:
                w = float(r["gender_code"])
                block[i, len(base_names):] = w * block[i, :len(base_names)]
            ys.append(float(r["value"]))
        blocks.append(block)
    return np.array(ys), LmmDesign.from_blocks(blocks, labels, names)
