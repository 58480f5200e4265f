"""Normal location-scale model with Huber Proposal-2 estimating equations."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateSample, NoConvergence
from .estfun import EstimatingFunctionModel, TuningConstants, consistency_k, huber_psi, huber_weight
from .numerics import as_generator, gauss_quadrature


@dataclass(frozen=True)
class ToyTheta:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.sigma])

    @classmethod
    def from_array(cls, a) -> "ToyTheta":
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class ContaminationSpec:
    """Gross-error mixture: with probability ``epsilon`` a unit's variance is
    multiplied by ``inflation``."""

    epsilon: float = 0.0
    inflation: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.inflation > 0:
            raise ValueError("inflation must be positive")


def _theta_pair(theta):
    if isinstance(theta, ToyTheta):
        return theta.mu, theta.sigma
    return float(theta[0]), float(theta[1])


def toy_psi_units(y, theta, tc: TuningConstants = TuningConstants()) -> np.ndarray:
    """Unit contributions ``(psi_c1(z_i), psi_c2(z_i)^2 - k(c2))``, shape ``(n, 2)``."""
    mu, sigma = _theta_pair(theta)
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma
    out = np.empty((z.size, 2))
    out[:, 0] = huber_psi(z, tc.c1)
    out[:, 1] = huber_psi(z, tc.c2) ** 2 - consistency_k(tc.c2)
    return out


def toy_psi(y, theta, tc: TuningConstants = TuningConstants()) -> np.ndarray:
    mu, sigma = _theta_pair(theta)
    y = np.asarray(y, dtype=np.float64)
    s = kernels.toy_stats(y, mu, sigma, tc.c1, tc.c2)
    s[1] -= y.size * consistency_k(tc.c2)
    return s


def toy_solve(y, tc: TuningConstants = TuningConstants(), max_iter: int = 200,
              tol: float = 1e-10) -> ToyTheta:
    """Huber Proposal-2 estimate of ``(mu, sigma)``.

    Alternates a weighted-mean update for ``mu`` with a multiplicative
    update of ``sigma^2``, starting from the median and normalised MAD.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 2:
        raise DegenerateSample("need at least two observations")
    mu = float(np.median(y))
    mad = float(np.median(np.abs(y - mu))) * 1.482602218505602
    if mad <= 0.0:
        raise DegenerateSample("median absolute deviation is zero")
    s2 = mad * mad
    nk = n * consistency_k(tc.c2)
    for _ in range(max_iter):
        sigma = math.sqrt(s2)
        z = (y - mu) / sigma
        w = huber_weight(z, tc.c1)
        mu = float(np.dot(w, y) / w.sum())
        z = (y - mu) / sigma
        s2 *= float(np.minimum(z * z, tc.c2 * tc.c2).sum()) / nk
        if np.abs(toy_psi(y, (mu, math.sqrt(s2)), tc)).max() <= tol:
            return ToyTheta(mu, math.sqrt(s2))
    raise NoConvergence(f"Huber Proposal-2 iteration did not converge in {max_iter} steps")


def toy_simulate(theta, n: int, cont: ContaminationSpec = ContaminationSpec(), rng=0) -> np.ndarray:
    """``n`` draws from ``(1 - eps) N(mu, sigma^2) + eps N(mu, inflation * sigma^2)``."""
    mu, sigma = _theta_pair(theta)
    gen = as_generator(rng)
    z = gen.standard_normal(n)
    hit = gen.random(n) < cont.epsilon
    scale = np.where(hit, math.sqrt(cont.inflation), 1.0)
    return mu + sigma * scale * z


def toy_analytic_HJ(theta, tc: TuningConstants = TuningConstants(), n: int = 1):
    """Sensitivity ``H`` and variability ``J`` of the toy equations at the normal model.

    Entries are expectations of psi, psi^2 and psi' against the standard
    normal, evaluated by quadrature.  Off-diagonal terms vanish by symmetry.
    """
    _, sigma = _theta_pair(theta)
    c1, c2 = tc.c1, tc.c2
    k2 = consistency_k(c2)
    e_dpsi1 = gauss_quadrature(lambda z: 1.0 if abs(z) < c1 else 0.0, (-c1, c1))
    e_z2in = gauss_quadrature(lambda z: z * z if abs(z) < c2 else 0.0, (-c2, c2))
    e_psi1sq = gauss_quadrature(lambda z: min(z * z, c1 * c1), (-c1, c1))
    e_psi2_4 = gauss_quadrature(lambda z: min(z * z, c2 * c2) ** 2, (-c2, c2))
    H = np.diag([n * e_dpsi1 / sigma, 2.0 * n * e_z2in / sigma])
    J = np.diag([n * e_psi1sq, n * (e_psi2_4 - k2 * k2)])
    return H, J


class ToyModel(EstimatingFunctionModel):
    """``N(mu, sigma^2)`` samples of fixed size ``n`` with Huber Proposal-2."""

    names = ("mu", "sigma")
    positive = np.array([False, True])

    def __init__(self, n: int, tc: TuningConstants = TuningConstants()):
        self.n = int(n)
        self.tc = tc
        self._k2 = consistency_k(tc.c2)

    def simulate(self, theta, rng):
        gen = as_generator(rng)
        return theta[0] + theta[1] * gen.standard_normal(self.n)

    def psi_units(self, y, theta):
        return toy_psi_units(y, theta, self.tc)

    def data_part(self, y, theta):
        return kernels.toy_stats(y, theta[0], theta[1], self.tc.c1, self.tc.c2)

    def correction_part(self, theta):
        return np.array([0.0, self.n * self._k2])

    def solve(self, y):
        return toy_solve(y, self.tc).as_array()

    def analytic_HJ(self, theta):
        return toy_analytic_HJ(theta, self.tc, self.n)

    def loglik(self, y, theta) -> float:
        mu, sigma = theta
        if sigma <= 0:
            return -np.inf
        r = (np.asarray(y) - mu) / sigma
        return float(-0.5 * np.dot(r, r) - y.size * math.log(sigma)
                     - 0.5 * y.size * math.log(2 * math.pi))
