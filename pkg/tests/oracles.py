"""Brute-force reference implementations shared by the EM and acceptance tests.

Everything here loops over (patch, shift, rotation) and builds predictions
from ``synthesize`` and ``shift_crop`` directly, never from the precomputed
prediction tables or the streaming kernel.
"""

import numpy as np

from mtdem.basis import CoeffVec, synthesize
from mtdem.em import shift_crop


def shift_crop_by_formula(image, lx, ly):
    # (C T_l Z F)[i, j] = (Z F)[(i + lx) mod 2L, (j + ly) mod 2L] for i, j < L
    n = image.shape[0]
    out = np.zeros_like(image)
    for i in range(n):
        for j in range(n):
            a, b = (i + lx) % (2 * n), (j + ly) % (2 * n)
            if a < n and b < n:
                out[i, j] = image[a, b]
    return out


def _shifts(L):
    return [(lx, ly) for lx in range(2 * L) for ly in range(2 * L)]


def brute_predictions(alpha, table, grid):
    L = table.L
    shifts = _shifts(L)
    preds = np.empty((len(shifts), grid.K, L, L))
    for k, phi in enumerate(grid.angles):
        img = synthesize(alpha, phi, table)
        for s, sh in enumerate(shifts):
            preds[s, k] = shift_crop(img, sh)
    return preds


def brute_posterior(patches, alpha, rho, sigma, table, grid):
    """Posterior (N_d, 4L^2, K), summed observed-data log-likelihood, predictions."""
    K = grid.K
    preds = brute_predictions(alpha, table, grid)
    n_shift = preds.shape[0]
    w = np.zeros((len(patches), n_shift, K))
    loglik = 0.0
    with np.errstate(divide="ignore"):
        logrho = np.log(rho)
    for m, x in enumerate(patches):
        logs = np.full((n_shift, K), -np.inf)
        for s in range(n_shift):
            for k in range(K):
                r = x - preds[s, k]
                logs[s, k] = -np.sum(r * r) / (2 * sigma**2) + logrho[s] - np.log(K)
        top = logs.max()
        e = np.exp(logs - top)
        w[m] = e / e.sum()
        loglik += top + np.log(e.sum())
    return w, loglik, preds


def brute_q(alpha, rho, w, patches, sigma, table, grid):
    """sum_m sum_{l,phi} w (log p(M_m | l, phi, alpha) + log rho[l]), constants dropped."""
    preds = brute_predictions(alpha, table, grid)
    total = 0.0
    for m, x in enumerate(patches):
        for s in range(preds.shape[0]):
            for k in range(preds.shape[1]):
                if w[m, s, k] == 0:
                    continue
                r = x - preds[s, k]
                total += w[m, s, k] * (-np.sum(r * r) / (2 * sigma**2) + np.log(rho[s]))
    return total


def brute_rho(w):
    return np.array([sum(w[m, s, k] for m in range(w.shape[0]) for k in range(w.shape[2])) for s in range(w.shape[1])]) / w.shape[0]


def brute_rhs(w, patches, table, grid):
    """Normal-equation right-hand side sum w <M_m, column_i(l, phi)> in the real parameterization."""
    L = table.L
    d = table.spec.real_dim
    rhs = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        unit = CoeffVec.from_real(table.spec, e)
        for k, phi in enumerate(grid.angles):
            col = synthesize(unit, phi, table)
            for s, sh in enumerate(_shifts(L)):
                g = shift_crop(col, sh)
                rhs[i] += np.sum(w[:, s, k] * np.einsum("mij,ij->m", patches, g))
    return rhs
