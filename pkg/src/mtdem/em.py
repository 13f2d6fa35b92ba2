"""Approximate expectation-maximization over patches of the measurement.

The measurement is cut into L x L patches. Each patch is modelled as a
shift-crop of one rotated copy of the image (possibly entirely outside the
patch) plus white noise. A hypothesis ``h = (shift, rotation)`` ranges over
``4 L^2`` shifts and ``K`` rotations; hypotheses are flattened as
``h = shift_index * K + k`` with ``shift_index = lx * 2L + ly``.

The prediction of hypothesis ``h`` is linear in the real coefficient vector,
``G[h] @ x`` with ``x = alpha.to_real()``. All E-step work is done in log
space with per-patch max subtraction.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basis import CoeffVec, build_basis

__all__ = [
    "EmConfig",
    "EmState",
    "PatchSet",
    "Posterior",
    "RotationGrid",
    "ShiftCropTable",
    "SingularMStepError",
    "SufficientStats",
    "partition",
    "shift_crop",
    "precompute_tables",
    "patch_loglik_table",
    "e_step",
    "accumulate",
    "m_step_alpha",
    "m_step_rho",
    "solve_alpha",
    "q_value",
    "q_from_stats",
    "uniform_rho",
    "rho_from_density",
    "normal_equations",
    "rho_from_stats",
    "stats_from_posterior",
    "tables_for",
    "run_em",
]

log = logging.getLogger(__name__)


class SingularMStepError(np.linalg.LinAlgError):
    """The M-step normal matrix is singular and no ridge was requested."""


@dataclass(frozen=True)
class RotationGrid:
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")

    @property
    def angles(self):
        return 2.0 * np.pi * np.arange(self.K) / self.K


@dataclass
class PatchSet:
    L: int
    patches: np.ndarray  # (N_d, L, L)

    @property
    def count(self):
        return self.patches.shape[0]

    def flat(self):
        return self.patches.reshape(self.count, self.L * self.L)


@dataclass
class EmConfig:
    K: int = 8
    epsilon: float = 1e-6
    max_iters: int = 200
    ridge: float = 1e-10
    n_restarts: int = 1
    chunk_size: int = 1024
    threads: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass
class Posterior:
    """Posterior weights, shape (N_d, 4 L^2, K)."""

    w: np.ndarray


@dataclass
class EmState:
    alpha: CoeffVec
    rho: np.ndarray
    iter: int
    loglik: float
    history: list = field(default_factory=list)
    wall_seconds: float = 0.0


def partition(M, L):
    """Split the top-left floor(N/L)*L square of ``M`` into L x L patches, row-major."""
    pixels = M.pixels if hasattr(M, "pixels") else np.asarray(M, dtype=float)
    N = pixels.shape[0]
    if N < L:
        raise ValueError(f"measurement side {N} is smaller than the patch size {L}")
    per_side = N // L
    cropped = pixels[: per_side * L, : per_side * L]
    blocks = cropped.reshape(per_side, L, per_side, L).swapaxes(1, 2)
    return PatchSet(L=L, patches=blocks.reshape(per_side * per_side, L, L).copy())


def _shift_indices(L, shift):
    lx, ly = shift
    if not (0 <= lx < 2 * L and 0 <= ly < 2 * L):
        raise ValueError(f"shift {shift} outside {{0..{2 * L - 1}}}^2")
    rows = (np.arange(L) + lx) % (2 * L)
    cols = (np.arange(L) + ly) % (2 * L)
    return rows, cols


def shift_crop(image, shift):
    """Zero-pad to 2L x 2L, shift circularly by ``shift`` and keep the top-left L x L."""
    image = np.asarray(image)
    L = image.shape[-1]
    rows, cols = _shift_indices(L, shift)
    padded = np.zeros(image.shape[:-2] + (2 * L, 2 * L), dtype=image.dtype)
    padded[..., :L, :L] = image
    return padded[..., rows[:, None], cols[None, :]]


@dataclass(frozen=True, eq=False)
class ShiftCropTable:
    """Linear prediction maps for every (shift, rotation) hypothesis."""

    L: int
    K: int
    G: np.ndarray  # (H, L*L, d_real)
    gram: np.ndarray  # (H, d_real, d_real)
    nonzero: np.ndarray  # (H,) bool, False where G[h] is identically zero
    shifts: np.ndarray  # (4 L^2, 2)

    @property
    def n_shifts(self):
        return 4 * self.L * self.L

    @property
    def H(self):
        return self.G.shape[0]

    @property
    def real_dim(self):
        return self.G.shape[2]


def precompute_tables(table, grid):
    """Build G[h] = shift_crop of the real design images rotated by phi_k."""
    L = table.L
    d = table.spec.real_dim
    shifts = np.array([(lx, ly) for lx in range(2 * L) for ly in range(2 * L)])
    G = np.empty((len(shifts), grid.K, L * L, d))
    for k, phi in enumerate(grid.angles):
        design = table.real_images(phi)
        for s, shift in enumerate(shifts):
            G[s, k] = shift_crop(design, tuple(shift)).reshape(d, L * L).T
    G = G.reshape(len(shifts) * grid.K, L * L, d)
    gram = np.einsum("hpi,hpj->hij", G, G)
    nonzero = np.any(G != 0.0, axis=(1, 2))
    for arr in (G, gram, nonzero):
        arr.flags.writeable = False
    return ShiftCropTable(L=L, K=grid.K, G=G, gram=gram, nonzero=nonzero, shifts=shifts)


def patch_loglik_table(patch, alpha, sigma, tables):
    """Unnormalised log-likelihoods -||patch - G[h] x||^2 / (2 sigma^2), shape (4L^2, K)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    pred = tables.G @ alpha.to_real()
    resid = np.asarray(patch, dtype=float).ravel()[None, :] - pred
    ll = -np.sum(resid * resid, axis=1) / (2.0 * sigma * sigma)
    return ll.reshape(tables.n_shifts, tables.K)


@dataclass
class SufficientStats:
    """Per-hypothesis totals over patches.

    ``W[h] = sum_m w[m, h]`` and ``B[h] = sum_m w[m, h] * patch_m`` (kept only
    for hypotheses with a nonzero prediction map).
    """

    W: np.ndarray  # (H,)
    B: np.ndarray  # (H_nonzero, L*L)
    sum_sq: float
    n_patches: int
    loglik: float


def _log_prior(rho, K):
    with np.errstate(divide="ignore"):
        return np.repeat(np.log(np.asarray(rho, dtype=float)), K) - np.log(K)


def _logsumexp(v):
    m = np.max(v)
    if not np.isfinite(m):
        return m
    return m + np.log(np.sum(np.exp(v - m)))


def _chunk_kernel(x, Pt, bias, inv2s2, keep_w):
    scores = x @ Pt
    scores += bias
    top = scores.max(axis=1, keepdims=True)
    scores -= top
    np.exp(scores, out=scores)
    z = scores.sum(axis=1, keepdims=True)
    scores /= z
    sq = np.einsum("ij,ij->i", x, x)
    ll = float(np.sum(np.log(z[:, 0]) + top[:, 0] - inv2s2 * sq))
    W = scores.sum(axis=0)
    B = scores[:, :-1].T @ x
    return W, B, float(sq.sum()), ll, (scores if keep_w else None)


def accumulate(patches, alpha, rho, sigma, tables, chunk_size=1024, threads=1, keep_w=False):
    """Streaming E-step: sufficient statistics and the observed-data log-likelihood.

    Hypotheses whose prediction map is zero share one likelihood, so they are
    merged into a single column carrying their summed prior and split back in
    proportion to ``rho`` afterwards. Chunks are reduced in order, making the
    result independent of ``threads``.

    Returns ``(stats, w)`` where ``w`` is the full (N_d, H) posterior when
    ``keep_w`` is set and None otherwise.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X = patches.flat() if isinstance(patches, PatchSet) else np.asarray(patches)
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("patches contain non-finite values")
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    nz = tables.nonzero
    lp = _log_prior(rho, tables.K)
    lp_empty = _logsumexp(lp[~nz]) if np.any(~nz) else -np.inf
    P = tables.G[nz] @ alpha.to_real()  # (H', L*L)
    Pt = np.concatenate([P.T * (2.0 * inv2s2), np.zeros((P.shape[1], 1))], axis=1)
    bias = np.concatenate([lp[nz] - inv2s2 * np.sum(P * P, axis=1), [lp_empty]])

    starts = range(0, X.shape[0], chunk_size)

    def work(s):
        return _chunk_kernel(X[s : s + chunk_size], Pt, bias, inv2s2, keep_w)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    Wc = np.zeros(len(bias))
    B = np.zeros((P.shape[0], X.shape[1]))
    sum_sq = 0.0
    ll = 0.0
    for Wp, Bp, sq, llp, _ in parts:
        Wc += Wp
        B += Bp
        sum_sq += sq
        ll += llp
    if not np.isfinite(ll):
        raise FloatingPointError("non-finite log-likelihood in the E-step")

    empty_share = np.zeros(tables.H)
    if np.isfinite(lp_empty):
        empty_share[~nz] = np.exp(lp[~nz] - lp_empty)
    W = np.zeros(tables.H)
    W[nz] = Wc[:-1]
    W[~nz] = Wc[-1] * empty_share[~nz]
    stats = SufficientStats(W=W, B=B, sum_sq=sum_sq, n_patches=X.shape[0], loglik=ll)

    w = None
    if keep_w:
        w = np.zeros((X.shape[0], tables.H))
        wc = np.concatenate([p[4] for p in parts], axis=0)
        w[:, nz] = wc[:, :-1]
        w[:, ~nz] = wc[:, -1:] * empty_share[~nz][None, :]
    return stats, w


def e_step(patches, alpha, rho, sigma, tables, grid=None, chunk_size=1024):
    """Posterior over (shift, rotation) for every patch and the monitored log-likelihood."""
    if grid is not None and grid.K != tables.K:
        raise ValueError("rotation grid does not match the tables")
    _check_rho(rho, tables)
    stats, w = accumulate(patches, alpha, rho, sigma, tables, chunk_size=chunk_size, keep_w=True)
    return Posterior(w.reshape(-1, tables.n_shifts, tables.K)), stats.loglik


def _check_rho(rho, tables):
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (tables.n_shifts,):
        raise ValueError(f"rho must have {tables.n_shifts} entries")
    if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
        raise ValueError("rho must lie on the probability simplex")


def stats_from_posterior(post, patches, tables):
    X = patches.flat()
    w = post.w.reshape(X.shape[0], tables.H)
    return SufficientStats(
        W=w.sum(axis=0),
        B=w[:, tables.nonzero].T @ X,
        sum_sq=float(np.sum(X * X)),
        n_patches=X.shape[0],
        loglik=float("nan"),
    )


def normal_equations(stats, tables):
    """Left-hand matrix sum_h W[h] G[h]^T G[h] and right-hand side sum_h G[h]^T B[h]."""
    lhs = np.einsum("h,hij->ij", stats.W, tables.gram)
    rhs = np.einsum("hpi,hp->i", tables.G[tables.nonzero], stats.B)
    return lhs, rhs


def solve_alpha(stats, tables, spec, ridge=1e-10):
    """Maximise the expected log-likelihood over alpha given sufficient statistics.

    ``ridge`` is relative to the mean diagonal of the normal matrix (absolute
    when that matrix is zero). With ``ridge = 0`` a singular system raises
    :class:`SingularMStepError`.
    """
    lhs, rhs = normal_equations(stats, tables)
    d = lhs.shape[0]
    scale = np.trace(lhs) / d
    if ridge > 0:
        lhs = lhs + ridge * (scale if scale > 0 else 1.0) * np.eye(d)
    eig = np.linalg.eigvalsh(lhs)
    if eig[-1] <= 0 or eig[0] <= d * np.finfo(float).eps * eig[-1]:
        raise SingularMStepError(
            "M-step normal matrix is singular; posterior mass sits on empty "
            "shifts. Use a positive ridge."
        )
    chol = np.linalg.cholesky(lhs)
    x = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return CoeffVec.from_real(spec, x)


def m_step_alpha(post, patches, tables, cfg, spec):
    return solve_alpha(stats_from_posterior(post, patches, tables), tables, spec, cfg.ridge)


def m_step_rho(post):
    """rho[l] = (1/N_d) sum_m sum_phi w[m, l, phi]."""
    w = post.w
    return w.sum(axis=(0, 2)) / w.shape[0]


def rho_from_stats(stats, tables):
    return stats.W.reshape(tables.n_shifts, tables.K).sum(axis=1) / stats.n_patches


def q_from_stats(alpha, rho, stats, tables, sigma):
    """Expected complete-data log-likelihood (additive constants dropped)."""
    x = alpha.to_real()
    pred = tables.G[tables.nonzero] @ x
    cross = float(np.sum(pred * stats.B))
    quad = float(np.einsum("h,hp,hp->", stats.W[tables.nonzero], pred, pred))
    data = -(stats.sum_sq - 2.0 * cross + quad) / (2.0 * sigma * sigma)
    mass = stats.W.reshape(tables.n_shifts, tables.K).sum(axis=1)
    rho = np.asarray(rho, dtype=float)
    if np.any((rho == 0) & (mass > 0)):
        raise ValueError("rho is zero on a shift that carries posterior mass")
    used = mass > 0
    return data + float(np.sum(mass[used] * np.log(rho[used])))


def q_value(alpha, rho, post, patches, tables, sigma):
    return q_from_stats(alpha, rho, stats_from_posterior(post, patches, tables), tables, sigma)


def uniform_rho(L):
    return np.full(4 * L * L, 1.0 / (4 * L * L))


def rho_from_density(gamma, L, n=None):
    """Shift prior for an assumed density of image copies.

    A copy overlapping a patch shows up at one of the (2L-1)^2 shifts whose
    crop window meets the L x L image square. Their total mass is the expected
    number of such overlaps per patch, ``gamma (2L-1)^2 / (pi n^2)``; the rest
    goes to the 4L-1 shifts that fall entirely in the zero padding.
    """
    n = (L - 1) // 2 if n is None else n
    idx = np.arange(2 * L)
    lx, ly = np.meshgrid(idx, idx, indexing="ij")
    padding = ((lx == L) | (ly == L)).ravel()
    hit = gamma * (2 * L - 1) ** 2 / (np.pi * n * n)
    if not 0 < hit < 1:
        raise ValueError(f"density {gamma} gives an invalid overlap mass {hit}")
    rho = np.where(padding, (1.0 - hit) / padding.sum(), hit / (~padding).sum())
    return rho


_TABLE_CACHE = {}


def tables_for(spec, K):
    key = (spec, K)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = precompute_tables(build_basis(spec), RotationGrid(K))
    return _TABLE_CACHE[key]


def run_em(M, sigma, cfg, alpha0, rho0=None, tables=None):
    """Alternate E and M steps until the log-likelihood gain drops to ``cfg.epsilon``.

    ``M`` is a :class:`~mtdem.sim.Measurement`, a pixel array or a
    :class:`PatchSet`. The returned history holds the log-likelihood of the
    initial guess followed by one entry per iteration.
    """
    if cfg.max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    spec = alpha0.spec
    tables = tables if tables is not None else tables_for(spec, cfg.K)
    patches = M if isinstance(M, PatchSet) else partition(M, spec.L)
    X = patches.flat()
    rho = uniform_rho(spec.L) if rho0 is None else np.asarray(rho0, dtype=float)
    _check_rho(rho, tables)
    alpha = alpha0
    t0 = time.perf_counter()

    def estep(a, r):
        stats, _ = accumulate(X, a, r, sigma, tables, cfg.chunk_size, cfg.threads)
        return stats

    stats = estep(alpha, rho)
    history = [stats.loglik]
    it = 0
    while it < cfg.max_iters:
        alpha = solve_alpha(stats, tables, spec, cfg.ridge)
        rho = rho_from_stats(stats, tables)
        stats = estep(alpha, rho)
        history.append(stats.loglik)
        it += 1
        log.debug("iter %d loglik %.10g", it, stats.loglik)
        if history[-1] - history[-2] <= cfg.epsilon:
            break
    return EmState(
        alpha=alpha,
        rho=rho,
        iter=it,
        loglik=history[-1],
        history=history,
        wall_seconds=time.perf_counter() - t0,
    )
