"""Command-line entry point: ``abcr <command> [options]``.

Commands: fit, calibrate, simulate, sensitivity, simstudy, gen-synthetic.
A JSON config file (``--config``) supplies settings; explicit flags win.
Unknown config keys are rejected.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure.  Errors are reported as JSON on stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import AbcrError, ConfigError
from .estfun import TuningConstants
from .harness import (SimStudyConfig, config_hash, fbst_evidence, posterior_summaries,
                      run_abcr, sensitivity_study, simulation_study)
from .lmm import LmmModel, design_from_long, lmm_reml_fit
from .numerics import RngStream
from .priors import PriorSpec
from .toy import ContaminationSpec, ToyModel, toy_simulate

log = logging.getLogger("abcr")

OUTPUT_ENV = "ABCR_OUTPUT_ROOT"

DEFAULTS = {
    "model": {"kind": "toy", "response": None, "interaction": False, "column": None},
    "prior": None,
    "tuning": {"c1": 1.345, "c2": 2.07},
    "sampler": {"h": None, "n_iter": 50_000, "burn_in": 5_000, "thin": 1, "proposal_df": 5,
                "target_rate": 0.01, "pilot_iter": 2000, "godambe": "auto", "nsim": 500},
    "contamination": {"epsilon": 0.0, "inflation": 10.0},
    "simulate": {"n": 15, "mu": 0.0, "sigma": 1.0},
    "sensitivity": {"n": 31, "c_min": -15, "c_max": 15, "methods": ["abcr", "genuine", "el"],
                    "n_grid": 201},
    "simstudy": {"q": 3, "g": 30, "n_reps": 50, "epsilon": 0.1, "inflation": 15.0,
                 "n_iter": 50_000, "burn_in": 10_000, "mcmc_iter": 50_000,
                 "mcmc_burn_in": 10_000, "nsim": 300},
    "synthetic": {"heavy_fraction": 0.1},
    "baseline": None,
    "seed": 0,
    "threads": None,
    "output": None,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def _flag_overrides(args) -> dict:
    """Map explicitly given flags onto config keys."""
    table = {
        "seed": ("seed",), "threads": ("threads",), "out": ("output",),
        "baseline": ("baseline",), "model": ("model", "kind"), "response": ("model", "response"),
        "interaction": ("model", "interaction"), "column": ("model", "column"),
        "h": ("sampler", "h"), "n_iter": ("sampler", "n_iter"), "burn_in": ("sampler", "burn_in"),
        "thin": ("sampler", "thin"), "target_rate": ("sampler", "target_rate"),
        "godambe": ("sampler", "godambe"), "nsim": ("sampler", "nsim"),
        "c1": ("tuning", "c1"), "c2": ("tuning", "c2"),
        "epsilon": ("contamination", "epsilon"), "inflation": ("contamination", "inflation"),
        "n": ("simulate", "n"), "mu": ("simulate", "mu"), "sigma": ("simulate", "sigma"),
        "q": ("simstudy", "q"), "g": ("simstudy", "g"), "reps": ("simstudy", "n_reps"),
        "heavy_fraction": ("synthetic", "heavy_fraction"),
    }
    out: dict = {}
    for attr, keys in table.items():
        v = getattr(args, attr, None)
        if v is None:
            continue
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = v
    return out


def _outdir(cfg, command) -> Path:
    root = cfg["output"] or os.environ.get(OUTPUT_ENV) or "abcr_output"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _tuning(cfg) -> TuningConstants:
    try:
        return TuningConstants(float(cfg["tuning"]["c1"]), float(cfg["tuning"]["c2"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_sampler(cfg):
    s = cfg["sampler"]
    if int(s["n_iter"]) < 1 or not 0 <= int(s["burn_in"]) < int(s["n_iter"]):
        raise ConfigError("sampler.burn_in must lie in [0, n_iter)")
    if s["h"] is not None and not float(s["h"]) > 0:
        raise ConfigError("sampler.h must be positive")
    if s["godambe"] not in ("auto", "analytic", "monte_carlo"):
        raise ConfigError("sampler.godambe must be auto, analytic or monte_carlo")
    if cfg["model"]["kind"] not in ("toy", "lmm"):
        raise ConfigError("model.kind must be toy or lmm")
    if cfg["baseline"] not in (None, "mcmc"):
        raise ConfigError("baseline must be null or 'mcmc'")


def _load_model(cfg, data_path):
    tc = _tuning(cfg)
    kind = cfg["model"]["kind"]
    if data_path is None:
        raise ConfigError("fit needs a data file")
    try:
        if kind == "toy":
            y = io.read_values(data_path, cfg["model"]["column"])
            model = ToyModel(y.size, tc)
            prior = PriorSpec.toy()
        else:
            rows = io.read_rows(data_path)
            y, design = design_from_long(rows, cfg["model"]["response"], bool(cfg["model"]["interaction"]))
            model = LmmModel(design, tc)
            prior = PriorSpec.lmm(design.q)
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, AbcrError) and not isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"cannot load data: {exc}") from None
    if cfg["prior"] is not None:
        try:
            prior = PriorSpec.from_dict(cfg["prior"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad prior: {exc}") from None
        if len(prior) != model.dim:
            raise ConfigError(f"prior has {len(prior)} components, model needs {model.dim}")
    return y, model, prior


def cmd_fit(cfg, data_path, calibrate_only: bool = False) -> dict:
    _check_sampler(cfg)
    y, model, prior = _load_model(cfg, data_path)
    out = _outdir(cfg, "fit")
    s = cfg["sampler"]
    stream = RngStream(int(cfg["seed"]))
    io.write_json(out / "config.json", cfg)
    fit = run_abcr(model, y, prior, stream.child("abcr"),
                   n_iter=int(s["pilot_iter"]) + 1 if calibrate_only else int(s["n_iter"]),
                   burn_in=0 if calibrate_only else int(s["burn_in"]),
                   h=None if calibrate_only else s["h"], godambe=s["godambe"], nsim=int(s["nsim"]),
                   target_rate=float(s["target_rate"]), pilot_iter=int(s["pilot_iter"]),
                   thin=int(s["thin"]), proposal_df=int(s["proposal_df"]))
    names = list(model.names)
    io.write_json(out / "mestimate.json", fit.mest.to_dict(names))
    io.write_rows(out / "calibration.csv", [{"h": h, "acceptance": r} for h, r in fit.calibration],
                  ["h", "acceptance"])
    if calibrate_only:
        res = {"h": fit.h, "calibration_points": len(fit.calibration)}
        io.write_json(out / "calibration.json", res)
        return res
    io.write_chain_csv(out / "chain.csv", fit.chain)
    io.write_json(out / "chain.json", {"config": fit.chain.config, "acceptance_rate": fit.chain.acceptance_rate,
                                       "accepted": fit.chain.accepted, "n_iter": fit.chain.n_iter,
                                       "h": fit.h, "seed": cfg["seed"], "names": names})
    fixed = names[:-2] if cfg["model"]["kind"] == "lmm" else names[:1]
    summary = {"abcr": {"theta_tilde": dict(zip(names, fit.mest.theta_tilde.tolist())),
                        "h": fit.h, "acceptance_rate": fit.chain.acceptance_rate,
                        "posterior": posterior_summaries(fit.chain),
                        "fbst": {nm: fbst_evidence(fit.chain.column(nm), 0.0, nm).e_value
                                 for nm in fixed}}}
    if cfg["baseline"] == "mcmc":
        from .baselines import full_mh
        init = (fit.mest.theta_tilde if cfg["model"]["kind"] == "toy"
                else lmm_reml_fit(y, model.design).as_array())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ch = full_mh(lambda t: model.loglik(y, t), prior, init, int(s["n_iter"]),
                         stream.child("mcmc"), burn_in=int(s["burn_in"]),
                         positive=model.positive, names=names)
        io.write_chain_csv(out / "mcmc_chain.csv", ch)
        summary["mcmc"] = {"acceptance_rate": ch.acceptance_rate,
                           "post_burn_in_acceptance": ch.config["post_burn_in_acceptance"],
                           "posterior": posterior_summaries(ch),
                           "fbst": {nm: fbst_evidence(ch.column(nm), 0.0, nm).e_value for nm in fixed}}
    io.write_json(out / "summary.json", summary)
    return {"h": fit.h, "acceptance_rate": fit.chain.acceptance_rate, "n_draws": int(fit.chain.draws.shape[0])}


def cmd_simulate(cfg) -> dict:
    sim = cfg["simulate"]
    c = cfg["contamination"]
    try:
        cont = ContaminationSpec(float(c["epsilon"]), float(c["inflation"]))
        n = int(sim["n"])
        if n < 1:
            raise ValueError("simulate.n must be positive")
        theta = (float(sim["mu"]), float(sim["sigma"]))
        if not theta[1] > 0:
            raise ValueError("simulate.sigma must be positive")
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    y = toy_simulate(theta, n, cont, RngStream(int(cfg["seed"])).child("simulate").generator())
    out = _outdir(cfg, "simulate")
    io.write_json(out / "config.json", cfg)
    io.write_rows(out / "data.csv", [{"y": v} for v in y], ["y"])
    return {"n": n}


def cmd_sensitivity(cfg) -> dict:
    sc = cfg["sensitivity"]
    s = cfg["sampler"]
    _check_sampler(cfg)
    if int(sc["n"]) % 2 == 0:
        raise ConfigError("sensitivity.n must be odd")
    bad = set(sc["methods"]) - {"abcr", "genuine", "el"}
    if bad:
        raise ConfigError(f"unknown sensitivity methods {sorted(bad)}")
    rows = sensitivity_study(c_grid=range(int(sc["c_min"]), int(sc["c_max"]) + 1),
                             methods=tuple(sc["methods"]), seed=int(cfg["seed"]), n=int(sc["n"]),
                             tc=_tuning(cfg), n_iter=int(s["n_iter"]), burn_in=int(s["burn_in"]),
                             n_grid=int(sc["n_grid"]))
    out = _outdir(cfg, "sensitivity")
    io.write_json(out / "config.json", cfg)
    io.write_rows(out / "sensitivity.csv", rows)
    return {"rows": len(rows)}


def cmd_simstudy(cfg) -> dict:
    ss = cfg["simstudy"]
    s = cfg["sampler"]
    try:
        scfg = SimStudyConfig(q=int(ss["q"]), g=int(ss["g"]), n_reps=int(ss["n_reps"]),
                              epsilon=float(ss["epsilon"]), inflation=float(ss["inflation"]),
                              seed=int(cfg["seed"]), n_iter=int(ss["n_iter"]),
                              burn_in=int(ss["burn_in"]), mcmc_iter=int(ss["mcmc_iter"]),
                              mcmc_burn_in=int(ss["mcmc_burn_in"]), nsim=int(ss["nsim"]),
                              pilot_iter=int(s["pilot_iter"]), target_rate=float(s["target_rate"]),
                              c1=float(cfg["tuning"]["c1"]), c2=float(cfg["tuning"]["c2"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    workers = cfg["threads"] or min(8, os.cpu_count() or 1)
    records, summary, timings = simulation_study(scfg, workers=int(workers))
    out = _outdir(cfg, "simstudy")
    io.write_json(out / "config.json", cfg)
    names = summary["names"]
    io.write_rows(out / "records.csv", [r.to_row(names) for r in records])
    io.write_json(out / "summary.json", summary)
    io.write_rows(out / "timing.csv", timings, ["replication", "method", "regime", "seconds"])
    return {"records": len(records), "failures": summary["n_failures"]}


def cmd_gen_synthetic(cfg) -> dict:
    from .synthetic import FIELDS, generate_grp94
    try:
        rows = generate_grp94(int(cfg["seed"]), float(cfg["synthetic"]["heavy_fraction"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _outdir(cfg, "gen-synthetic")
    io.write_json(out / "config.json", cfg)
    io.write_rows(out / "grp94_synthetic.csv", rows, list(FIELDS))
    return {"rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abcr", description="Robust ABC with M-estimating functions.")
    p.add_argument("--version", action="version", version=f"abcr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./abcr_output)")
        sp.add_argument("--threads", type=int, help="maximum worker processes")
        sp.add_argument("--c1", type=float)
        sp.add_argument("--c2", type=float)
        sp.add_argument("-v", "--verbose", action="store_true")

    def sampler(sp):
        sp.add_argument("--h", type=float, help="kernel variance; calibrated when omitted")
        sp.add_argument("--n-iter", dest="n_iter", type=int)
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--thin", type=int)
        sp.add_argument("--target-rate", dest="target_rate", type=float)
        sp.add_argument("--godambe", choices=["auto", "analytic", "monte_carlo"])
        sp.add_argument("--nsim", type=int)

    for name in ("fit", "calibrate"):
        sp = sub.add_parser(name, help="fit ABC-R to a data file" if name == "fit"
                            else "calibrate the kernel variance only")
        common(sp)
        sampler(sp)
        sp.add_argument("data", nargs="?", help="input CSV with a header row")
        sp.add_argument("--model", choices=["toy", "lmm"])
        sp.add_argument("--response")
        sp.add_argument("--column")
        sp.add_argument("--interaction", action="store_const", const=True)
        if name == "fit":
            sp.add_argument("--baseline", choices=["mcmc"])

    sp = sub.add_parser("simulate", help="draw a toy sample")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--inflation", type=float)

    sp = sub.add_parser("sensitivity", help="shift the middle observation and refit")
    common(sp)
    sampler(sp)

    sp = sub.add_parser("simstudy", help="replicated LMM comparison of ABC-R and MCMC")
    common(sp)
    sp.add_argument("--q", type=int)
    sp.add_argument("--g", type=int)
    sp.add_argument("--reps", type=int)

    sp = sub.add_parser("gen-synthetic", help="write a synthetic grouped long-format dataset")
    common(sp)
    sp.add_argument("--heavy-fraction", dest="heavy_fraction", type=float)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(msg), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _flag_overrides(args))
        if cfg["threads"] is not None and int(cfg["threads"]) < 1:
            raise ConfigError("threads must be positive")
        cmd = args.command
        if cmd == "fit":
            res = cmd_fit(cfg, args.data)
        elif cmd == "calibrate":
            res = cmd_fit(cfg, args.data, calibrate_only=True)
        elif cmd == "simulate":
            res = cmd_simulate(cfg)
        elif cmd == "sensitivity":
            res = cmd_sensitivity(cfg)
        elif cmd == "simstudy":
            res = cmd_simstudy(cfg)
        else:
            res = cmd_gen_synthetic(cfg)
    except ConfigError as exc:
        return _fail(2, exc)
    except (AbcrError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
        return _fail(3, exc)
    res["config_hash"] = config_hash(cfg)
    print(json.dumps(res, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
