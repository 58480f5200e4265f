"""Independent product priors built from normal and half-Cauchy factors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    sd: float = 1.0

    positive = False

    def logpdf(self, x: float) -> float:
        z = (x - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - _LOG_SQRT_2PI

    def sample(self, rng, size):
        return self.mean + self.sd * rng.standard_normal(size)

    def to_dict(self):
        return {"family": "normal", "mean": self.mean, "sd": self.sd}


@dataclass(frozen=True)
class HalfCauchy:
    """Half-Cauchy with density ``2 / (pi a (1 + (x/a)^2))`` on ``x > 0``.

    With ``on_sqrt`` the half-Cauchy is placed on ``sqrt(x)`` instead,
    e.g. a prior on a standard deviation when the coordinate is a variance.
    """

    scale: float
    on_sqrt: bool = False

    positive = True

    def logpdf(self, x: float) -> float:
        if not x > 0:
            return -math.inf
        if self.on_sqrt:
            r = math.sqrt(x)
            return self._log_hc(r) - math.log(2.0 * r)
        return self._log_hc(x)

    def _log_hc(self, x):
        u = x / self.scale
        return math.log(2.0 / (math.pi * self.scale)) - math.log1p(u * u)

    def sample(self, rng, size):
        draw = self.scale * np.abs(rng.standard_cauchy(size))
        return draw * draw if self.on_sqrt else draw

    def to_dict(self):
        return {"family": "halfcauchy", "scale": self.scale, "on_sqrt": self.on_sqrt}


class PriorSpec:
    """Product prior; ``logpdf`` is ``-inf`` outside the support."""

    def __init__(self, components):
        self.components = tuple(components)

    def __len__(self):
        return len(self.components)

    def logpdf(self, theta) -> float:
        total = 0.0
        for comp, x in zip(self.components, theta):
            v = comp.logpdf(float(x))
            if v == -math.inf:
                return v
            total += v
        return total

    def sample(self, rng, size: int) -> np.ndarray:
        return np.column_stack([c.sample(rng, size) for c in self.components])

    def to_dict(self):
        return [c.to_dict() for c in self.components]

    @classmethod
    def from_dict(cls, items) -> "PriorSpec":
        comps = []
        for it in items:
            fam = it["family"]
            if fam == "normal":
                comps.append(Normal(float(it.get("mean", 0.0)), float(it["sd"])))
            elif fam == "halfcauchy":
                comps.append(HalfCauchy(float(it["scale"]), bool(it.get("on_sqrt", False))))
            else:
                raise ValueError(f"unknown prior family {fam!r}")
        return cls(comps)

    @classmethod
    def toy(cls, mu_sd: float = 10.0, sigma_scale: float = 5.0) -> "PriorSpec":
        return cls([Normal(0.0, mu_sd), HalfCauchy(sigma_scale)])

    @classmethod
    def lmm(cls, q: int, alpha_sd: float = 10.0, var_scale: float = 7.0) -> "PriorSpec":
        return cls([Normal(0.0, alpha_sd)] * q + [HalfCauchy(var_scale), HalfCauchy(var_scale)])
