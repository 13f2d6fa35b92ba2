"""Command-line driver: simulate, recover, sweep, summarize, eval-error.

Every command reads one merged configuration (built-in defaults, then the
``--config`` JSON file, then ``--set key=value`` overrides, then the explicit
flags) and stamps it, with ``git describe``, into what it writes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from .basis import CoeffVec, build_basis, build_index_set, random_image_coeffs
from .em import EmConfig, SingularMStepError, rho_from_density
from .evaluation import SweepSpec, fit, read_records, rotation_error, run_sweep, summarize, write_records
from .sim import FormatError, SimConfig, generate, read_measurement, write_measurement

log = logging.getLogger("mtdem")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

COMMANDS = ("simulate", "recover", "sweep", "summarize", "eval-error")

DEFAULTS = {
    "n": 2,
    "coeffs": 10,
    "N": 250,
    "snr": 5.0,
    "sigma": None,
    "gamma": 0.04,
    "gamma_init": 0.03,
    "K": 8,
    "epsilon": 1e-6,
    "epsilon_per_patch": 2e-6,
    "max_iters": 200,
    "restarts": 1,
    "ridge": 1e-10,
    "threads": 1,
    "seed": 0,
    "trials": 10,
    "kind": "size",
    "grid": [250, 500, 1000],
    "init": "random",
    "truth": None,
}


class ConfigError(ValueError):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_types(cfg):
    for key, default in DEFAULTS.items():
        value = cfg[key]
        if default is None or value is None:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"config key {key!r} has the wrong type: {value!r}")
    if cfg["init"] not in ("random", "truth"):
        raise ConfigError("init must be 'random' or 'truth'")


def parse_config(path=None, overrides=()):
    """defaults <- JSON file <- ``key=value`` overrides; unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        cfg[key] = _parse_value(raw)
    _check_types(cfg)
    return cfg


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _threads(cfg):
    return cfg["threads"] if cfg["threads"] > 0 else (os.cpu_count() or 1)


def _spec(cfg):
    return build_index_set(cfg["n"], cfg["coeffs"], real_dim=True)


def _sidecar(path):
    return Path(str(path) + ".json")


def _write_json(path, obj):
    if path is None or str(path) == "-":
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")


def _provenance(cfg):
    return {"config": cfg, "git": git_describe()}


def cmd_simulate(cfg, args):
    if args.out is None:
        raise ConfigError("simulate needs --out")
    table = build_basis(_spec(cfg))
    rng = np.random.default_rng(cfg["seed"])
    truth = random_image_coeffs(table, rng)
    if cfg["sigma"] is not None:
        sim = SimConfig(N=cfg["N"], gamma=cfg["gamma"], sigma=cfg["sigma"], seed=cfg["seed"])
    else:
        sim = SimConfig(N=cfg["N"], gamma=cfg["gamma"], snr=cfg["snr"], seed=cfg["seed"])
    meas = generate(truth, sim, table)
    write_measurement(args.out, meas)
    side = {
        **_provenance(cfg),
        "truth": truth.to_json(),
        "sigma": meas.sigma,
        "achieved_p": meas.achieved_p,
    }
    _write_json(_sidecar(args.out), side)
    log.info("wrote %s (N=%d, p=%d, sigma=%.6g)", args.out, meas.N, meas.achieved_p, meas.sigma)
    return EXIT_OK


def _load_truth(cfg, fallback_path=None):
    path = cfg["truth"] or (fallback_path if fallback_path and Path(fallback_path).exists() else None)
    if path is None:
        return None
    with open(path) as fh:
        obj = json.load(fh)
    return CoeffVec.from_json(obj["truth"] if "truth" in obj else obj)


def cmd_recover(cfg, args):
    if args.inp is None:
        raise ConfigError("recover needs --in")
    meas = read_measurement(args.inp)
    truth = _load_truth(cfg, _sidecar(args.inp))
    spec = truth.spec if truth is not None else _spec(cfg)
    table = build_basis(spec)
    em_cfg = EmConfig(
        K=cfg["K"],
        epsilon=cfg["epsilon"],
        max_iters=cfg["max_iters"],
        ridge=cfg["ridge"],
        n_restarts=cfg["restarts"],
        threads=_threads(cfg),
    )
    rng = np.random.default_rng(cfg["seed"])
    inits = None
    if cfg["init"] == "truth":
        if truth is None:
            raise ConfigError("init=truth needs ground truth (a sidecar or the truth key)")
        inits = [truth]
    rho0 = rho_from_density(cfg["gamma_init"], spec.L, spec.n)
    best, states = fit(meas, meas.sigma, table, em_cfg, rng, rho0=rho0, alpha_inits=inits)
    out = {
        **_provenance(cfg),
        "input": str(args.inp),
        "alpha": best.alpha.to_json(),
        "rho": best.rho.tolist(),
        "loglik": best.loglik,
        "loglik_history": list(best.history),
        "iterations": best.iter,
        "wall_seconds": sum(s.wall_seconds for s in states),
        "restart_logliks": [s.loglik for s in states],
    }
    if truth is not None:
        out["truth"] = truth.to_json()
        out["error"] = rotation_error(truth, best.alpha)
    _write_json(args.out, out)
    log.info("recover: %d iterations, loglik %.10g", best.iter, best.loglik)
    return EXIT_OK


def cmd_sweep(cfg, args):
    if args.out is None:
        raise ConfigError("sweep needs --out")
    base = {
        "n": cfg["n"],
        "coeffs": cfg["coeffs"],
        "N": cfg["N"],
        "snr": cfg["snr"],
        "gamma": cfg["gamma"],
        "gamma_init": cfg["gamma_init"],
        "K": cfg["K"],
        "epsilon": cfg["epsilon"],
        "epsilon_per_patch": cfg["epsilon_per_patch"],
        "max_iters": cfg["max_iters"],
        "n_restarts": cfg["restarts"],
        "ridge": cfg["ridge"],
        "threads": _threads(cfg),
    }
    try:
        spec = SweepSpec(kind=cfg["kind"], grid=list(cfg["grid"]), trials=cfg["trials"], base=base, seed_base=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    def progress(r):
        log.info("%s=%g trial %d: error %.4g, %d iterations", r.kind, r.sweep_value, r.trial, r.error, r.iterations)

    records = run_sweep(spec, progress=progress)
    write_records(args.out, records)
    _write_json(_sidecar(args.out), _provenance(cfg))
    return EXIT_OK


def cmd_summarize(cfg, args):
    if args.inp is None:
        raise ConfigError("summarize needs --in")
    records = read_records(args.inp)
    if not records:
        raise FormatError(f"{args.inp}: no records")
    _write_json(args.out, {**_provenance(cfg), **summarize(records)})
    return EXIT_OK


def cmd_eval_error(cfg, args):
    if args.inp is None:
        raise ConfigError("eval-error needs --in")
    with open(args.inp) as fh:
        est = json.load(fh)
    alpha = CoeffVec.from_json(est["alpha"] if "alpha" in est else est)
    truth = _load_truth(cfg)
    if truth is None and "truth" in est:
        truth = CoeffVec.from_json(est["truth"])
    if truth is None:
        raise ConfigError("eval-error needs ground truth: set truth=<path> or pass an estimate that embeds it")
    _write_json(args.out, {**_provenance(cfg), "error": rotation_error(truth, alpha)})
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "recover": cmd_recover,
    "sweep": cmd_sweep,
    "summarize": cmd_summarize,
    "eval-error": cmd_eval_error,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mtdem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out")
        p.add_argument("--in", dest="inp")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads, 0 = one per core")
        if name == "recover":
            p.add_argument("--k", type=int)
            p.add_argument("--eps", type=float)
            p.add_argument("--max-iters", type=int)
            p.add_argument("--restarts", type=int)
    return parser


def _flag_overrides(args):
    pairs = {
        "seed": args.seed,
        "threads": args.threads,
        "K": getattr(args, "k", None),
        "epsilon": getattr(args, "eps", None),
        "max_iters": getattr(args, "max_iters", None),
        "restarts": getattr(args, "restarts", None),
    }
    return [f"{k}={json.dumps(v)}" for k, v in pairs.items() if v is not None]


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = parse_config(args.config, [*args.overrides, *_flag_overrides(args)])
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, FormatError, json.JSONDecodeError, KeyError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (SingularMStepError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
