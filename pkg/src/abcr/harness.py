"""Posterior summaries, FBST evidence, and the sensitivity and simulation studies."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .baselines import full_mh, grid_posterior
from .errors import AbcrError, DegenerateSample, StuckChainWarning
from .estfun import TuningConstants
from .godambe import MEstimate, fit_mestimate
from .lmm import LmmDesign, LmmModel, lmm_reml_fit, lmm_simulate
from .numerics import RngStream, binned_kde, silverman_bandwidth
from .priors import PriorSpec
from .sampler import AbcrConfig, Chain, SummaryContext, abcr_mcmc, calibrate_h
from .toy import ContaminationSpec, ToyModel, toy_simulate

log = logging.getLogger(__name__)

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def effective_sample_size(x) -> float:
    """ESS by Geyer's initial monotone sequence estimator.

    A constant series has ESS 1.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 2:
        return float(n)
    xc = x - x.mean()
    var = float(xc @ xc) / n
    if var <= 0.0 or not math.isfinite(var):
        return 1.0
    m = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    rho = acov / acov[0]
    # pair sums Gamma_k = rho_{2k} + rho_{2k+1}
    npair = n // 2
    gam = rho[0:2 * npair:2] + rho[1:2 * npair:2]
    pos = np.flatnonzero(gam <= 0.0)
    cut = pos[0] if pos.size else gam.size
    gam = np.minimum.accumulate(gam[:cut])
    tau = -1.0 + 2.0 * gam.sum() if gam.size else 1.0
    tau = max(tau, 1.0 / n)
    return float(n / tau)


def posterior_summaries(chain, names=None) -> dict:
    """Componentwise mean, median, quantiles and ESS.

    ``chain`` is a :class:`Chain` or an array of draws ``(m, d)``.
    """
    if isinstance(chain, Chain):
        draws, names = chain.draws, chain.names if names is None else names
    else:
        draws = np.atleast_2d(np.asarray(chain, dtype=np.float64))
        if draws.shape[0] == 1 and draws.shape[1] > 1 and names is None:
            draws = draws.T
    if draws.shape[0] == 0:
        raise ValueError("empty chain")
    names = tuple(names) if names is not None else tuple(f"theta{i}" for i in range(draws.shape[1]))
    out = {}
    for k, nm in enumerate(names):
        col = draws[:, k]
        qs = np.quantile(col, QUANTILES)
        out[nm] = {
            "mean": float(col.mean()),
            "median": float(qs[2]),
            "q025": float(qs[0]), "q25": float(qs[1]), "q50": float(qs[2]),
            "q75": float(qs[3]), "q975": float(qs[4]),
            "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
            "ess": effective_sample_size(col),
        }
    return out


@dataclass
class EvidenceResult:
    parameter: str
    e_value: float
    bandwidth: float
    n_draws: int
    theta0: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.e_value <= 1.0:
            raise ValueError("e-value outside [0, 1]")


def fbst_evidence(draws, theta0: float = 0.0, name: str = "theta",
                  grid_size: int = 4096) -> EvidenceResult:
    """FBST e-value from a marginal Gaussian KDE.

    The share of draws whose estimated density does not exceed the density
    at ``theta0``.  Densities at the draws are interpolated from a binned
    KDE on at least ``grid_size`` points; the density at ``theta0`` is
    evaluated exactly.
    """
    x = np.asarray(draws, dtype=np.float64).ravel()
    if x.size < 1000:
        raise ValueError("FBST needs at least 1000 draws")
    if np.all(x == x[0]):
        raise DegenerateSample("all draws are identical")
    bw = silverman_bandwidth(x)
    grid, dens_grid = binned_kde(x, bw, min_size=grid_size)
    dens_x = np.interp(x, grid, dens_grid)
    d0 = float(kernels.kde_eval(x, np.array([float(theta0)]), bw)[0])
    e = float(np.mean(dens_x <= d0))
    return EvidenceResult(name, e, float(bw), int(x.size), float(theta0))


# ---------------------------------------------------------------------------
# ABC-R pipeline
# ---------------------------------------------------------------------------

@dataclass
class AbcrFit:
    mest: MEstimate
    h: float
    chain: Chain
    calibration: list = field(default_factory=list)


def run_abcr(model, y, prior: PriorSpec, stream: RngStream, n_iter: int = 50_000,
             burn_in: int = 5_000, h: float | None = None, godambe: str = "auto",
             nsim: int = 500, target_rate: float = 0.01, pilot_iter: int = 2000,
             thin: int = 1, keep_norms: bool = False, proposal_df: int = 5) -> AbcrFit:
    """Solve, build the sandwich, calibrate ``h`` when not given, and sample."""
    if godambe == "auto":
        godambe = "analytic" if hasattr(model, "analytic_HJ") else "monte_carlo"
    mest = fit_mestimate(model, y, godambe, nsim=nsim, rng=stream.child("godambe").generator())
    ctx = SummaryContext.build(model, y, mest)
    table = []
    if h is None:
        pilot = AbcrConfig(h=1.0, n_iter=pilot_iter, proposal_df=proposal_df)
        h, table = calibrate_h(model, prior, ctx, pilot, target_rate, rng=stream.child("calibrate"),
                               return_table=True)
    cfg = AbcrConfig(h=h, n_iter=n_iter, burn_in=burn_in, thin=thin, proposal_df=proposal_df)
    with warnings.catch_warnings():
        warnings.simplefilter("always", StuckChainWarning)
        chain = abcr_mcmc(model, prior, ctx, cfg, stream.child("chain"), keep_norms=keep_norms)
    return AbcrFit(mest, float(h), chain, table)


# ---------------------------------------------------------------------------
# sensitivity study (toy model)
# ---------------------------------------------------------------------------

def contaminate_middle(y, c: float) -> np.ndarray:
    """Sorted sample with its middle order statistic shifted by ``c``."""
    ys = np.sort(np.asarray(y, dtype=np.float64))
    if ys.size % 2 == 0:
        raise ValueError("sample size must be odd")
    ys[ys.size // 2] += c
    return ys


def toy_posterior_quantiles(method: str, y, prior: PriorSpec, tc: TuningConstants,
                            stream: RngStream, n_iter: int = 50_000, burn_in: int = 5_000,
                            n_grid: int = 201) -> dict:
    """Median and quartiles of ``mu`` and ``sigma`` under one toy posterior."""
    y = np.asarray(y, dtype=np.float64)
    out = {}
    if method == "abcr":
        fit = run_abcr(ToyModel(y.size, tc), y, prior, stream, n_iter=n_iter, burn_in=burn_in)
        s = posterior_summaries(fit.chain)
        for nm in ("mu", "sigma"):
            out[nm] = (s[nm]["q25"], s[nm]["median"], s[nm]["q75"])
        out["h"] = fit.h
    elif method in ("genuine", "el"):
        kind = "genuine" if method == "genuine" else "empirical_likelihood"
        gp = grid_posterior(kind, y, prior, tc, n_grid=n_grid, auto_widen=True)
        for k, nm in enumerate(("mu", "sigma")):
            q = gp.quantile(k, [0.25, 0.5, 0.75])
            out[nm] = (float(q[0]), float(q[1]), float(q[2]))
    else:
        raise ValueError(f"unknown method {method!r}")
    return out


def sensitivity_study(y=None, c_grid=range(-15, 16), methods=("abcr", "genuine", "el"),
                      seed: int = 0, n: int = 31, prior: PriorSpec | None = None,
                      tc: TuningConstants = TuningConstants(), n_iter: int = 50_000,
                      burn_in: int = 5_000, n_grid: int = 201) -> list[dict]:
    """Posterior medians and quartiles as the middle observation is shifted.

    ``y`` defaults to ``n`` central draws from the ``"data"`` stream of
    ``seed``.  Each method uses the same stream for every ``c``, so the
    ``c = 0`` row reproduces an uncontaminated run exactly.
    """
    master = RngStream(seed)
    if y is None:
        y = toy_simulate((0.0, 1.0), n, rng=master.child("data").generator())
    y = np.asarray(y, dtype=np.float64)
    prior = PriorSpec.toy() if prior is None else prior
    conf = {"seed": seed, "n": int(y.size), "methods": list(methods), "n_iter": n_iter,
            "burn_in": burn_in, "n_grid": n_grid, "c1": tc.c1, "c2": tc.c2,
            "prior": prior.to_dict()}
    chash = config_hash(conf)
    rows = []
    for c in c_grid:
        yc = contaminate_middle(y, float(c))
        for m in methods:
            res = toy_posterior_quantiles(m, yc, prior, tc, master.child(f"method:{m}"),
                                          n_iter=n_iter, burn_in=burn_in, n_grid=n_grid)
            for nm in ("mu", "sigma"):
                q25, med, q75 = res[nm]
                rows.append({"c": int(c), "method": m, "parameter": nm, "median": med,
                             "q25": q25, "q75": q75, "seed": seed, "config_hash": chash})
    return rows


# ---------------------------------------------------------------------------
# simulation study (nested LMM)
# ---------------------------------------------------------------------------

@dataclass
class SimStudyRecord:
    replication: int
    seed: int
    method: str
    regime: str
    theta0: list
    theta_median: list
    log_abs_bias: list
    euclidean_bias: float
    config_hash: str = ""

    @classmethod
    def build(cls, rep, seed, method, regime, theta0, med, chash=""):
        theta0 = np.asarray(theta0, dtype=np.float64)
        med = np.asarray(med, dtype=np.float64)
        err = med - theta0
        with np.errstate(divide="ignore"):
            lab = np.log(np.abs(err))
        return cls(rep, seed, method, regime, theta0.tolist(), med.tolist(), lab.tolist(),
                   float(np.linalg.norm(err)), chash)

    def to_row(self, names) -> dict:
        row = {"replication": self.replication, "seed": self.seed, "method": self.method,
               "regime": self.regime}
        for k, nm in enumerate(names):
            row[f"theta0_{nm}"] = self.theta0[k]
        for k, nm in enumerate(names):
            row[f"median_{nm}"] = self.theta_median[k]
        for k, nm in enumerate(names):
            row[f"log_abs_bias_{nm}"] = self.log_abs_bias[k]
        row["euclidean_bias"] = self.euclidean_bias
        row["config_hash"] = self.config_hash
        return row


@dataclass(frozen=True)
class SimStudyConfig:
    q: int = 3
    g: int = 30
    n_reps: int = 50
    epsilon: float = 0.10
    inflation: float = 15.0
    seed: int = 0
    n_iter: int = 50_000
    burn_in: int = 10_000
    mcmc_iter: int = 50_000
    mcmc_burn_in: int = 10_000
    nsim: int = 300
    pilot_iter: int = 2000
    target_rate: float = 0.01
    c1: float = 1.345
    c2: float = 2.07
    regimes: tuple = ("central", "contaminated")
    methods: tuple = ("abcr", "mcmc")

    def __post_init__(self):
        if self.n_reps < 2:
            raise ValueError("n_reps must be at least 2")
        bad = set(self.methods) - {"abcr", "mcmc"}
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        bad = set(self.regimes) - {"central", "contaminated"}
        if bad:
            raise ValueError(f"unknown regimes {sorted(bad)}")

    def to_dict(self):
        d = asdict(self)
        d["regimes"] = list(self.regimes)
        d["methods"] = list(self.methods)
        return d


def draw_theta0(q: int, gen) -> np.ndarray:
    """``alpha ~ U(-5, 5)^q`` and both variance components ``~ U(1, 10)``."""
    alpha = gen.uniform(-5.0, 5.0, q)
    var = gen.uniform(1.0, 10.0, 2)
    return np.concatenate([alpha, var])


def _one_replication(args):
    cfg, rep = args
    cfg = SimStudyConfig(**cfg)
    chash = config_hash(cfg.to_dict())
    stream = RngStream(cfg.seed).child(f"rep{rep}")
    rep_seed = int(stream.child("id").generator().integers(2**63))
    theta0 = draw_theta0(cfg.q, stream.child("theta0").generator())
    design = LmmDesign.nested(cfg.g, cfg.q)
    tc = TuningConstants(cfg.c1, cfg.c2)
    model = LmmModel(design, tc)
    prior = PriorSpec.lmm(cfg.q)
    records, timings, failures = [], [], []
    for regime in cfg.regimes:
        cont = (ContaminationSpec(cfg.epsilon, cfg.inflation) if regime == "contaminated"
                else ContaminationSpec())
        rs = stream.child(regime)
        y = lmm_simulate(theta0, design, cont, rs.child("data").generator())
        for method in cfg.methods:
            t0 = time.perf_counter()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    if method == "abcr":
                        fit = run_abcr(model, y, prior, rs.child("abcr"), n_iter=cfg.n_iter,
                                       burn_in=cfg.burn_in, godambe="monte_carlo", nsim=cfg.nsim,
                                       target_rate=cfg.target_rate, pilot_iter=cfg.pilot_iter)
                        draws = fit.chain.draws
                    else:
                        init = lmm_reml_fit(y, design).as_array()
                        ch = full_mh(lambda t: model.loglik(y, t), prior, init, cfg.mcmc_iter,
                                     rs.child("mcmc"), burn_in=cfg.mcmc_burn_in,
                                     positive=model.positive, names=model.names)
                        draws = ch.draws
            except (AbcrError, np.linalg.LinAlgError, ValueError) as exc:
                failures.append({"replication": rep, "method": method, "regime": regime,
                                 "error": f"{type(exc).__name__}: {exc}"})
                continue
            med = np.median(draws, axis=0)
            records.append(SimStudyRecord.build(rep, rep_seed, method, regime, theta0, med, chash))
            timings.append({"replication": rep, "method": method, "regime": regime,
                            "seconds": time.perf_counter() - t0})
    return records, timings, failures


def simulation_study(cfg: SimStudyConfig = SimStudyConfig(), workers: int | None = 1):
    """Run the replicated LMM comparison.

    Returns ``(records, summary, timings)``.  ``records`` are ordered by
    replication, regime and method regardless of ``workers``; runtimes are
    kept apart so that record tables are reproducible byte for byte.
    """
    jobs = [(cfg.to_dict(), r) for r in range(cfg.n_reps)]
    if workers is None or workers <= 1:
        results = [_one_replication(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_replication, jobs))
    records, timings, failures = [], [], []
    for r, t, f in results:
        records.extend(r)
        timings.extend(t)
        failures.extend(f)
    names = tuple(LmmDesign.nested(cfg.g, cfg.q).column_names) + ("sigma1_sq", "sigma2_sq")
    summary = summarize_study(records, names)
    summary["failures"] = failures
    summary["n_failures"] = len(failures)
    summary["config"] = cfg.to_dict()
    summary["config_hash"] = config_hash(cfg.to_dict())
    return records, summary, timings


def summarize_study(records, names) -> dict:
    """Median Euclidean bias and the ``MD_MCMC / MD_ABC`` efficiency index.

    ``MD`` is computed both as the signed median of ``theta_median - theta0``
    (primary) and as the median absolute error.  Input order is irrelevant.
    """
    out = {"names": list(names), "regimes": {}}
    regimes = sorted({r.regime for r in records})
    for regime in regimes:
        block = {}
        for method in sorted({r.method for r in records}):
            rs = sorted((r for r in records if r.regime == regime and r.method == method),
                        key=lambda r: r.replication)
            if not rs:
                continue
            err = np.array([np.subtract(r.theta_median, r.theta0) for r in rs])
            block[method] = {
                "n": len(rs),
                "median_euclidean_bias": float(np.median([r.euclidean_bias for r in rs])),
                "md_signed": np.median(err, axis=0).tolist(),
                "md_abs": np.median(np.abs(err), axis=0).tolist(),
            }
        if "abcr" in block and "mcmc" in block:
            a, m = block["abcr"], block["mcmc"]
            with np.errstate(divide="ignore", invalid="ignore"):
                block["efficiency_signed"] = (np.array(m["md_signed"]) / np.array(a["md_signed"])).tolist()
                block["efficiency_abs"] = (np.array(m["md_abs"]) / np.array(a["md_abs"])).tolist()
        out["regimes"][regime] = block
    return out
