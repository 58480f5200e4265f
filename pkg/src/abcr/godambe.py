"""Sensitivity, variability and sandwich (Godambe) matrices."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import NonFiniteDerivative, NotPositiveDefinite, SingularH
from .estfun import EstimatingFunctionModel
from .numerics import as_generator, matrix_sqrt, symmetrize

log = logging.getLogger(__name__)


@dataclass
class MEstimate:
    """An M-estimate with its sandwich ingredients evaluated at the estimate."""

    theta_tilde: np.ndarray
    H: np.ndarray
    J: np.ndarray
    K: np.ndarray
    B_R: np.ndarray
    source: str
    asymmetry: float = 0.0

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.B_R))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.K))

    def to_dict(self, names=None):
        names = list(names) if names is not None else None
        return {
            "names": names,
            "theta_tilde": self.theta_tilde.tolist(),
            "H": self.H.tolist(),
            "J": self.J.tolist(),
            "K": self.K.tolist(),
            "B_R": self.B_R.tolist(),
            "source": self.source,
            "H_asymmetry": self.asymmetry,
            "B_R_condition": self.condition_number,
        }


def _ridge_to_spd(M, what):
    M = symmetrize(M)
    try:
        np.linalg.cholesky(M)
        return M
    except np.linalg.LinAlgError:
        pass
    d = M.shape[0]
    M = M + 1e-10 * np.trace(M) / d * np.eye(d)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(f"{what} is not positive definite after ridging") from None
    return M


def simulate_psi(model: EstimatingFunctionModel, theta, nsim: int, rng) -> np.ndarray:
    """``nsim`` draws of ``Psi(y*; theta)`` with ``y*`` simulated at ``theta``."""
    gen = as_generator(rng)
    theta = np.asarray(theta, dtype=np.float64)
    corr = model.correction_part(theta)
    B = model.b_matrix(theta)
    return np.array([B.T @ model.data_part(model.simulate(theta, gen), theta) - corr
                     for _ in range(nsim)])


def estimate_J(model: EstimatingFunctionModel, theta, nsim: int = 500, rng=0,
               center: bool = False) -> np.ndarray:
    """Monte Carlo variability matrix ``E[Psi Psi']``.

    The raw second moment is used by default, which is exact when the
    estimating function has mean zero at ``theta``.  ``center=True`` uses
    the covariance instead, for equations that are only consistent.
    """
    if nsim < 50:
        raise ValueError("nsim must be at least 50")
    P = simulate_psi(model, theta, nsim, rng)
    if center:
        P = P - P.mean(axis=0)
    return _ridge_to_spd(P.T @ P / nsim, "J")


def estimate_H(model: EstimatingFunctionModel, theta, nsim: int = 500, rng=0,
               fd_step: float = 1e-4, symmetric: bool = True):
    """Monte Carlo sensitivity ``-E[dPsi/dtheta']`` by central differences.

    Datasets are simulated once at ``theta`` and reused for every
    perturbed evaluation.  Steps on positive coordinates are capped at half
    the current value so both evaluation points stay in the support.  Returns ``(H, asymmetry)`` where ``asymmetry`` is
    ``||H - H'||_F / ||H||_F`` before any symmetrisation.
    """
    if nsim < 50:
        raise ValueError("nsim must be at least 50")
    gen = as_generator(rng)
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    positive = np.asarray(getattr(model, "positive", np.zeros(d, dtype=bool)), dtype=bool)
    ys = [model.simulate(theta, gen) for _ in range(nsim)]

    def mean_psi(t):
        corr = model.correction_part(t)
        B = model.b_matrix(t)
        return np.mean([B.T @ model.data_part(y, t) for y in ys], axis=0) - corr

    H = np.empty((d, d))
    for k in range(d):
        h = fd_step * max(1.0, abs(theta[k]))
        if positive[k]:
            h = min(h, 0.5 * theta[k])
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        H[:, k] = -(mean_psi(tp) - mean_psi(tm)) / (2.0 * h)
    if not np.all(np.isfinite(H)):
        raise NonFiniteDerivative("finite-difference sensitivity is not finite")
    asym = float(np.linalg.norm(H - H.T) / max(np.linalg.norm(H), 1e-300))
    log.debug("sensitivity asymmetry %.3g", asym)
    if symmetric:
        H = symmetrize(H)
    return H, asym


def sandwich(H, J):
    """Return ``(K, B_R)`` with ``K = H^{-1} J H^{-T}`` and ``B_R = chol(J)``."""
    H = np.asarray(H, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            lu = linalg.lu_factor(H, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularH(str(exc)) from None
    if np.any(np.abs(np.diag(lu[0])) <= np.finfo(float).eps * np.abs(H).max() * H.shape[0]):
        raise SingularH("sensitivity matrix is singular")
    A = linalg.lu_solve(lu, J)
    K = symmetrize(linalg.lu_solve(lu, A.T))
    return K, matrix_sqrt(J, "lower_cholesky")


def fit_mestimate(model: EstimatingFunctionModel, y, method: str = "monte_carlo",
                  nsim: int = 500, rng=0, center: bool | None = None,
                  theta_tilde=None) -> MEstimate:
    """Solve the estimating equation on ``y`` and attach ``H``, ``J``, ``K``, ``B_R``.

    ``method="analytic"`` needs a model with ``analytic_HJ``.  When
    ``center`` is None it follows the model's ``centered_J`` attribute.
    """
    theta = np.asarray(model.solve(y) if theta_tilde is None else theta_tilde, dtype=np.float64)
    if method == "analytic":
        H, J = model.analytic_HJ(theta)
        asym = 0.0
        source = "analytic"
    elif method == "monte_carlo":
        gen = as_generator(rng)
        if center is None:
            center = bool(getattr(model, "centered_J", False))
        J = estimate_J(model, theta, nsim, gen, center=center)
        H, asym = estimate_H(model, theta, nsim, gen)
        source = f"monte_carlo({nsim})"
    else:
        raise ValueError(f"unknown method {method!r}")
    K, B = sandwich(H, J)
    return MEstimate(theta, np.asarray(H), np.asarray(J), K, B, source, asym)
