"""Linear-algebra and random-number primitives shared by every module."""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg, signal, stats

from . import kernels
from .errors import DegenerateSample, NonConvergence, NotPositiveDefinite


class SpdMatrix(np.ndarray):
    """A symmetric positive-definite matrix, validated on construction.

    Behaves as a plain ``ndarray``; the subclass only records that the
    checks passed.
    """

    def __new__(cls, data, rtol: float = 1e-12):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise NotPositiveDefinite(f"expected a square matrix, got shape {arr.shape}")
        scale = max(np.abs(arr).max(), np.finfo(float).tiny)
        if np.abs(arr - arr.T).max() > rtol * scale:
            raise NotPositiveDefinite("matrix is not symmetric")
        arr = 0.5 * (arr + arr.T)
        if not np.all(np.isfinite(arr)) or np.linalg.eigvalsh(arr)[0] <= 0.0:
            raise NotPositiveDefinite("matrix has a non-positive eigenvalue")
        return arr.view(cls)

    def __array_finalize__(self, obj):
        pass

    @property
    def dim(self) -> int:
        return self.shape[0]


def symmetrize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * (m + m.T)


def matrix_sqrt(m, mode: str = "lower_cholesky") -> np.ndarray:
    """Square root of an SPD matrix.

    ``lower_cholesky`` returns lower-triangular ``B`` with ``B @ B.T == m``;
    ``symmetric_eigen`` returns the unique SPD ``B`` with ``B @ B == m``.
    """
    m = np.asarray(m, dtype=np.float64)
    if mode == "lower_cholesky":
        try:
            return np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
    if mode == "symmetric_eigen":
        w, U = np.linalg.eigh(symmetrize(m))
        if w[0] <= 0.0:
            raise NotPositiveDefinite("matrix has a non-positive eigenvalue")
        return (U * np.sqrt(w)) @ U.T
    raise ValueError(f"unknown mode {mode!r}")


def inverse_sqrt_sym(m) -> np.ndarray:
    """Symmetric inverse square root ``m^{-1/2}`` of an SPD matrix."""
    w, U = np.linalg.eigh(symmetrize(m))
    if w[0] <= 0.0:
        raise NotPositiveDefinite("matrix has a non-positive eigenvalue")
    return (U / np.sqrt(w)) @ U.T


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _stream_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream ids must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream path)``.

    Streams are derived with ``numpy.random.SeedSequence`` spawn keys, so
    distinct paths give statistically independent Philox generators.
    Named children (``stream.child("abc")``) give per-stage streams.
    """

    seed: int
    stream: tuple = (0,)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        s = self.stream
        if isinstance(s, (int, np.integer, str)):
            s = (s,)
        object.__setattr__(self, "stream", tuple(_stream_key(k) for k in s))

    def child(self, key) -> "RngStream":
        return RngStream(self.seed, self.stream + (_stream_key(key),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept an ``RngStream``, a ``Generator`` or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot make a generator from {type(rng).__name__}")


def draw_mvn(mean, cov, rng, size: int | None = None) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    L = matrix_sqrt(cov)
    if L.shape[0] != mean.shape[0]:
        raise ValueError("mean and covariance dimensions differ")
    gen = as_generator(rng)
    if size is None:
        return mean + L @ gen.standard_normal(mean.shape[0])
    z = gen.standard_normal((size, mean.shape[0]))
    return mean + z @ L.T


def draw_mvt(center, scale, df: int, rng, size: int | None = None) -> np.ndarray:
    """Multivariate t draw ``center + B z sqrt(df / w)`` with ``B = chol(scale)``."""
    if df < 1:
        raise ValueError("df must be >= 1")
    center = np.asarray(center, dtype=np.float64)
    L = matrix_sqrt(scale)
    gen = as_generator(rng)
    d = center.shape[0]
    if size is None:
        z = gen.standard_normal(d)
        w = gen.chisquare(df)
        return center + (L @ z) * math.sqrt(df / w)
    z = gen.standard_normal((size, d))
    w = gen.chisquare(df, size=size)
    return center + (z @ L.T) * np.sqrt(df / w)[:, None]


# ---------------------------------------------------------------------------
# density estimation and quadrature
# ---------------------------------------------------------------------------

def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0.0:
        spread = sd
    if spread <= 0.0:
        raise DegenerateSample("all samples are identical")
    return 0.9 * spread * n ** (-0.2)


def kde_density(samples, x, bw: float | None = None):
    """Gaussian KDE with Silverman's bandwidth, evaluated at ``x``."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2 or np.all(s == s[0]):
        raise DegenerateSample("need at least two distinct samples")
    if bw is None:
        bw = silverman_bandwidth(s)
    out = kernels.kde_eval(s, x, bw)
    return float(out[0]) if np.ndim(x) == 0 else out


def binned_kde(samples, bw: float, cells_per_bw: int = 20, min_size: int = 4096,
               max_size: int = 1 << 20):
    """Gaussian KDE on a regular grid by linear binning and FFT convolution.

    Returns ``(grid, density)``.  The grid spans the samples plus five
    bandwidths on each side with at least ``cells_per_bw`` cells per
    bandwidth (capped at ``max_size`` points).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    lo, hi = x.min() - 5.0 * bw, x.max() + 5.0 * bw
    size = int(min(max(min_size, math.ceil((hi - lo) / bw * cells_per_bw) + 1), max_size))
    grid = np.linspace(lo, hi, size)
    delta = grid[1] - grid[0]
    pos = (x - lo) / delta
    left = np.minimum(np.floor(pos).astype(np.int64), size - 2)
    frac = pos - left
    counts = (np.bincount(left, 1.0 - frac, size) + np.bincount(left + 1, frac, size))
    half = int(min(math.ceil(5.0 * bw / delta), size - 1))
    u = np.arange(-half, half + 1) * delta / bw
    kern = np.exp(-0.5 * u * u) / (x.size * bw * math.sqrt(2.0 * math.pi))
    dens = signal.fftconvolve(counts, kern, mode="same")
    return grid, np.maximum(dens, 0.0)


def gauss_quadrature(f: Callable[[float], float], breakpoints: Sequence[float] = (),
                     tol: float = 1e-10) -> float:
    """``E f(Z)`` for standard normal ``Z`` by adaptive quadrature.

    ``breakpoints`` split the real line at kinks of ``f`` so each piece is
    smooth.
    """
    edges = [-np.inf, *sorted(float(b) for b in breakpoints), np.inf]
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        for a, b in zip(edges[:-1], edges[1:]):
            try:
                val, err = integrate.quad(lambda z: f(z) * stats.norm.pdf(z), a, b,
                                          epsabs=tol * 1e-2, epsrel=1e-13, limit=500)
            except (integrate.IntegrationWarning, OverflowError) as exc:
                raise NonConvergence(f"quadrature failed on [{a}, {b}]: {exc}") from None
            if not (math.isfinite(val) and math.isfinite(err)) or err > tol:
                raise NonConvergence(f"quadrature error {err:.2e} exceeds {tol:.1e}")
            total += val
    return total


def solve_spd(m, b) -> np.ndarray:
    try:
        return linalg.solve(m, b, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(str(exc)) from None
