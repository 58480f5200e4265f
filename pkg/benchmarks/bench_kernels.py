"""Time each hot kernel under the numpy and numba paths.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Numba timings exclude compilation (one warm-up call per kernel).  An
end-to-end toy ABC-R chain is timed as well.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from abcr import kernels
from abcr.godambe import fit_mestimate
from abcr.lmm import LmmDesign
from abcr.numerics import RngStream
from abcr.priors import PriorSpec
from abcr.sampler import AbcrConfig, SummaryContext, abcr_mcmc
from abcr.toy import ToyModel, toy_simulate


def cases(gen):
    y = gen.standard_normal(200)
    d = LmmDesign.nested(50, 5)
    e = gen.standard_normal(d.n)
    psi = gen.standard_normal((500, 30, 2)) + 0.1
    draws = gen.standard_normal(20_000)
    pts = np.linspace(-4, 4, 512)
    return {
        "toy_stats (n=200)": lambda: kernels.toy_stats(y, 0.1, 1.2, 1.345, 2.07),
        "lmm_group_terms (g=50, q=5)": lambda: kernels.lmm_group_terms(
            e, d.starts, d.sizes, d.X, 1.5, 0.7, 1.345, 2.07),
        "lmm_loglik (g=50)": lambda: kernels.lmm_loglik(e, d.starts, d.sizes, 1.5, 0.7),
        "el_batch (500 x 30 x 2)": lambda: kernels.el_batch(psi),
        "kde_eval (2e4 x 512)": lambda: kernels.kde_eval(draws, pts, 0.1),
    }


def toy_chain():
    y = toy_simulate((0.0, 1.0), 200, rng=RngStream(1).generator())
    model = ToyModel(200)
    ctx = SummaryContext.build(model, y, fit_mestimate(model, y, "analytic"))
    cfg = AbcrConfig(h=0.05, n_iter=5000)
    return lambda: abcr_mcmc(model, PriorSpec.toy(), ctx, cfg, RngStream(2), keep_norms=False)


def bench(repeat: int) -> dict:
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    out = {}
    for be in backends:
        prev = kernels.set_backend(be)
        try:
            fns = cases(np.random.default_rng(0))
            fns["toy ABC-R chain (5000 iter)"] = toy_chain()
            for name, fn in fns.items():
                fn()
                number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
                best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
                out.setdefault(name, {})[be] = best
        finally:
            kernels.set_backend(prev)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)
    res = bench(args.repeat)
    print(f"{'kernel':32s} {'numpy':>12s} {'numba':>12s} {'speedup':>8s}")
    for name, t in res.items():
        nb = t.get("numba")
        sp = f"{t['numpy'] / nb:8.1f}" if nb else f"{'-':>8s}"
        nb_s = f"{nb * 1e6:10.1f}us" if nb else f"{'n/a':>12s}"
        print(f"{name:32s} {t['numpy'] * 1e6:10.1f}us {nb_s} {sp}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
