"""Synthetic long-format immunology-style data with a grouped, gendered layout.

The generator reproduces the shape of a small repeated-measures study:
units observed under six conditions (a baseline and five treatments), a
binary gender code, one response with 27 usable units and four with 24.
Values are log-scale draws from a nested LMM with a gender interaction;
a fraction of units receives heavy-tailed noise.  All rows are labelled
``source=synthetic``.
"""
from __future__ import annotations

import numpy as np

from .numerics import RngStream

RESPONSES = {"IgG": 27, "IFNg": 24, "IL6": 24, "IL10": 24, "TNFa": 24}
CONDITIONS = ("baseline", "GRP94_10", "GRP94_100", "IgG_100", "GRP94+IgG_10", "GRP94+IgG_100")
FIELDS = ("unit_id", "response", "treatment", "treatment_code", "gender_code", "value", "source")


def generate_grp94(seed: int = 0, heavy_fraction: float = 0.1, responses=None) -> list[dict]:
    """Long-format rows, one per unit x condition x response.

    ``heavy_fraction`` of units per response get Student-t(2) noise scaled
    by 3 on top of the Gaussian error.
    """
    if not 0.0 <= heavy_fraction <= 1.0:
        raise ValueError("heavy_fraction must lie in [0, 1]")
    master = RngStream(seed)
    responses = list(RESPONSES) if responses is None else list(responses)
    # 28 enrolled units; gender is a unit attribute shared by all responses
    gender = master.child("gender").generator().integers(0, 2, 28)
    rows = []
    for resp in responses:
        g = RESPONSES[resp]
        gen = master.child(f"response:{resp}").generator()
        units = np.sort(gen.choice(28, size=g, replace=False))
        alpha = np.concatenate([[gen.uniform(2.0, 5.0)], gen.normal(0.0, 0.4, 5)])
        gamma = gen.normal(0.0, 0.25, 6)
        s1, s2 = gen.uniform(0.1, 0.5), gen.uniform(0.05, 0.2)
        heavy = gen.random(g) < heavy_fraction
        b = gen.normal(0.0, np.sqrt(s1), g)
        eps = gen.normal(0.0, np.sqrt(s2), (g, 6))
        extra = 3.0 * np.sqrt(s2) * gen.standard_t(2, (g, 6))
        for j, u in enumerate(units):
            w = int(gender[u])
            for t in range(6):
                mean = alpha[0] + (alpha[t] if t else 0.0) + w * (gamma[0] + (gamma[t] if t else 0.0))
                v = mean + b[j] + eps[j, t] + (extra[j, t] if heavy[j] else 0.0)
                rows.append({"unit_id": f"U{u + 1:02d}", "response": resp,
                             "treatment": CONDITIONS[t], "treatment_code": t,
                             "gender_code": w, "value": float(v), "source": "synthetic"})
    return rows
