"""Error metric, restart selection and the parameter sweeps."""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .basis import build_basis, build_index_set, random_image_coeffs
from .em import EmConfig, rho_from_density, run_em, tables_for
from .sim import SimConfig, generate

__all__ = [
    "SweepSpec",
    "TrialRecord",
    "rotation_error",
    "select_best",
    "fit",
    "trial_seed",
    "run_trial",
    "run_sweep",
    "fit_loglog_slope",
    "summarize",
    "write_records",
    "read_records",
]

CSV_COLUMNS = ["kind", "sweep_value", "trial", "error", "loglik", "iterations", "wall_seconds", "seed"]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f, a, b, tol=1e-10):
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def rotation_error(alpha_true, alpha_est, grid_size=1024):
    """min over phi of ||alpha_true - steer(alpha_est, phi)|| / ||alpha_true||.

    Coarse search on ``grid_size`` equispaced angles, then golden-section
    refinement of the best bracket down to 1e-10 radians.
    """
    if alpha_true.spec != alpha_est.spec:
        raise ValueError("coefficient vectors use different bases")
    ref = alpha_true.values
    scale = np.linalg.norm(ref)
    if scale == 0:
        raise ValueError("true coefficient vector is zero")
    est = alpha_est.values
    nus = alpha_true.spec.nus

    def dist(phi):
        return float(np.linalg.norm(ref - est * np.exp(1j * nus * phi)))

    phis = 2.0 * np.pi * np.arange(grid_size) / grid_size
    rot = est[None, :] * np.exp(1j * np.outer(phis, nus))
    coarse = np.linalg.norm(ref[None, :] - rot, axis=1)
    i = int(np.argmin(coarse))
    step = 2.0 * np.pi / grid_size
    _, best = _golden_min(dist, phis[i] - step, phis[i] + step)
    return min(best, float(coarse[i])) / scale


def select_best(states):
    """State with the largest final log-likelihood; the earliest one wins ties."""
    if not states:
        raise ValueError("no EM states to choose from")
    best = 0
    for i, st in enumerate(states):
        if st.loglik > states[best].loglik:
            best = i
    return states[best]


def fit(meas, sigma, table, cfg, rng, rho0=None, alpha_inits=None):
    """Run EM from ``cfg.n_restarts`` random starts and keep the most likely.

    Starting coefficients are drawn like the test images (uniform pixels,
    norm 10, projected). Returns ``(best, all_states)``.
    """
    tables = tables_for(table.spec, cfg.K)
    if alpha_inits is None:
        alpha_inits = [random_image_coeffs(table, rng) for _ in range(cfg.n_restarts)]
    states = [run_em(meas, sigma, cfg, a0, rho0, tables=tables) for a0 in alpha_inits]
    return select_best(states), states


@dataclass
class TrialRecord:
    kind: str
    sweep_value: float
    trial: int
    error: float
    loglik: float
    iterations: int
    wall_seconds: float
    seed: int


DEFAULT_BASE = {
    "n": 2,
    "coeffs": 10,
    "N": 250,
    "snr": 5.0,
    "gamma": 0.04,
    "gamma_init": 0.03,
    "K": 8,
    "epsilon": 1e-6,
    "epsilon_per_patch": 2e-6,
    "max_iters": 200,
    "n_restarts": 1,
    "ridge": 1e-10,
    "threads": 1,
}


@dataclass
class SweepSpec:
    """One parameter sweep: ``kind`` picks which of snr, N (size) or K varies."""

    kind: str
    grid: list
    trials: int = 10
    base: dict = field(default_factory=dict)
    seed_base: int = 0

    def __post_init__(self):
        if self.kind not in ("snr", "size", "k"):
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if not self.grid:
            raise ValueError("sweep grid is empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("sweep grid must be strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        unknown = set(self.base) - set(DEFAULT_BASE)
        if unknown:
            raise ValueError(f"unknown base keys: {sorted(unknown)}")
        self.base = {**DEFAULT_BASE, **self.base}


def trial_seed(seed_base, sweep_value, trial):
    """seed_base XOR a stable 63-bit hash of (sweep_value, trial)."""
    digest = hashlib.blake2b(f"{float(sweep_value)!r}:{int(trial)}".encode(), digest_size=8)
    return int(seed_base) ^ (int.from_bytes(digest.digest(), "little") >> 1)


def _params_for(kind, value, base):
    p = dict(base)
    key = {"snr": "snr", "size": "N", "k": "K"}[kind]
    p[key] = value
    p["N"] = int(p["N"])
    p["K"] = int(p["K"])
    return p


def run_trial(kind, value, trial, base, seed_base):
    """One sweep cell: fresh image, fresh measurement, EM restarts, error of the best."""
    p = _params_for(kind, value, base)
    seed = trial_seed(seed_base, value, trial)
    rng = np.random.default_rng(seed)
    spec = build_index_set(p["n"], p["coeffs"], real_dim=True)
    table = build_basis(spec)
    truth = random_image_coeffs(table, rng)
    sim_seed = int(rng.integers(2**63))
    meas = generate(truth, SimConfig(N=p["N"], gamma=p["gamma"], snr=p["snr"], seed=sim_seed), table)
    n_patches = (p["N"] // spec.L) ** 2
    # the log-likelihood grows with the patch count, so scale the stopping gain with it
    epsilon = max(p["epsilon"], (p["epsilon_per_patch"] or 0.0) * n_patches)
    cfg = EmConfig(
        K=p["K"],
        epsilon=epsilon,
        max_iters=p["max_iters"],
        ridge=p["ridge"],
        n_restarts=p["n_restarts"],
        threads=p["threads"],
    )
    rho0 = rho_from_density(p["gamma_init"], spec.L, spec.n)
    t0 = time.perf_counter()
    best, _ = fit(meas, meas.sigma, table, cfg, rng, rho0=rho0)
    wall = time.perf_counter() - t0
    return TrialRecord(
        kind=kind,
        sweep_value=float(value),
        trial=trial,
        error=rotation_error(truth, best.alpha),
        loglik=best.loglik,
        iterations=best.iter,
        wall_seconds=wall,
        seed=seed,
    )


def run_sweep(spec, progress=None):
    records = []
    for value in spec.grid:
        for t in range(spec.trials):
            rec = run_trial(spec.kind, value, t, spec.base, spec.seed_base)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


def fit_loglog_slope(sizes, errors):
    """Least-squares slope of log(error) against log(N^2)."""
    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if sizes.size < 3 or sizes.size != errors.size:
        raise ValueError("need at least 3 (size, error) points")
    slope, _ = np.polyfit(np.log(sizes**2), np.log(errors), 1)
    return float(slope)


def summarize(records):
    """Mean/std per sweep value, plus the log-log slope for size sweeps."""
    groups = {}
    for r in records:
        groups.setdefault((r.kind, r.sweep_value), []).append(r)
    rows = []
    for (kind, value), rs in sorted(groups.items()):
        errs = np.array([r.error for r in rs])
        walls = np.array([r.wall_seconds for r in rs])
        rows.append(
            {
                "kind": kind,
                "sweep_value": value,
                "trials": len(rs),
                "mean_error": float(errs.mean()),
                "std_error": float(errs.std(ddof=1)) if len(rs) > 1 else 0.0,
                "mean_wall_seconds": float(walls.mean()),
            }
        )
    out = {"groups": rows}
    sizes = [r["sweep_value"] for r in rows if r["kind"] == "size"]
    if len(sizes) >= 3:
        errs = [r["mean_error"] for r in rows if r["kind"] == "size"]
        out["loglog_slope"] = fit_loglog_slope(sizes, errs)
    return out


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))


def read_records(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                TrialRecord(
                    kind=row["kind"],
                    sweep_value=float(row["sweep_value"]),
                    trial=int(row["trial"]),
                    error=float(row["error"]),
                    loglik=float(row["loglik"]),
                    iterations=int(row["iterations"]),
                    wall_seconds=float(row["wall_seconds"]),
                    seed=int(row["seed"]),
                )
            )
    return out
