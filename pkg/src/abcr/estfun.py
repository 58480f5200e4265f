"""Huber primitives and the estimating-function model contract.

An estimating function has the shape ``Psi(y; theta) = b(theta)' a(y, theta) - c(theta)``
where ``c`` is a consistency correction.  Models expose ``a`` and ``c``
separately so the sampler can difference ``a`` between observed and
simulated data without ever recomputing ``c``.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

DEFAULT_C1 = 1.345
DEFAULT_C2 = 2.07


@dataclass(frozen=True)
class TuningConstants:
    """Huber bounds for the location (``c1``) and scale (``c2``) equations."""

    c1: float = DEFAULT_C1
    c2: float = DEFAULT_C2

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("tuning constants must be positive")


def huber_psi(z, c: float):
    """``sign(z) * min(|z|, c)``."""
    return np.clip(z, -c, c)


def huber_weight(z, c: float):
    """``min(1, c/|z|)``, equal to 1 at zero; ``huber_psi == z * huber_weight``."""
    az = np.abs(np.asarray(z, dtype=np.float64))
    with np.errstate(divide="ignore"):
        w = np.where(az > c, c / np.where(az > c, az, 1.0), 1.0)
    return w if np.ndim(z) else float(w)


def consistency_k(c: float) -> float:
    """``E[min(Z^2, c^2)]`` for standard normal ``Z``.

    Makes the Huber Proposal-2 scale equation unbiased at the normal model.
    """
    phi = math.exp(-0.5 * c * c) / math.sqrt(2.0 * math.pi)
    Phi = float(ndtr(c))
    upper = float(ndtr(-c))
    return 2.0 * Phi - 1.0 - 2.0 * c * phi + 2.0 * c * c * upper


class EstimatingFunctionModel(ABC):
    """A parametric model paired with an unbiased M-estimating function.

    Implementors are immutable after construction.  ``theta`` is always a
    1-d float array; coordinates flagged in ``positive`` must stay > 0.
    """

    names: tuple[str, ...]
    positive: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.names)

    @abstractmethod
    def simulate(self, theta, rng):
        """Draw a dataset from the central model at ``theta``."""

    @abstractmethod
    def psi_units(self, y, theta) -> np.ndarray:
        """Per-unit contributions, shape ``(n_units, d)``; they sum to ``psi``."""

    @abstractmethod
    def data_part(self, y, theta) -> np.ndarray:
        """The data-dependent vector ``a(y, theta)``."""

    @abstractmethod
    def correction_part(self, theta) -> np.ndarray:
        """The consistency correction ``c(theta)``."""

    def b_matrix(self, theta) -> np.ndarray:
        return np.eye(self.dim)

    def psi(self, y, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return self.b_matrix(theta).T @ self.data_part(y, theta) - self.correction_part(theta)

    @abstractmethod
    def solve(self, y):
        """Root of ``psi(y, .) = 0``; returns the estimate as a 1-d array."""

    def boundary(self, theta) -> np.ndarray:
        """Coordinates where an estimate sits on the support boundary.

        Their equations need not vanish at a constrained estimate.
        """
        return np.zeros(self.dim, dtype=bool)

    def in_support(self, theta) -> bool:
        theta = np.asarray(theta, dtype=np.float64)
        return bool(np.all(np.isfinite(theta)) and np.all(theta[self.positive] > 0))
