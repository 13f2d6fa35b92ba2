# %% [markdown]
# # Recovering the image with approximate EM
#
# The measurement is cut into L x L patches. Each patch is explained by one of
# 4L^2 shifts of a zero-padded copy (many of them partial, some empty) at one
# of K rotations. EM alternates between posterior weights over those
# hypotheses and a linear least-squares update of the coefficients.

# %%
import numpy as np

from mtdem.basis import build_basis, build_index_set, random_image_coeffs
from mtdem.em import EmConfig, rho_from_density, run_em
from mtdem.evaluation import fit, rotation_error
from mtdem.sim import SimConfig, generate

table = build_basis(build_index_set(2, 10, real_dim=True))
rng = np.random.default_rng(3)
truth = random_image_coeffs(table, rng)
meas = generate(truth, SimConfig(N=400, snr=10.0, seed=3), table)
print("patches:", (meas.N // table.L) ** 2, " copies:", meas.achieved_p)

# %% [markdown]
# ## One run from a random start
#
# The initial guess is drawn like the ground truth, and the shift prior
# starts from an assumed density of 0.03. The monitored log-likelihood never
# decreases.

# %%
start = random_image_coeffs(table, rng)
cfg = EmConfig(K=8, epsilon=1e-6 * (meas.N // 5) ** 2, max_iters=100)
state = run_em(meas, meas.sigma, cfg, start, rho_from_density(0.03, table.L, 2))
h = np.array(state.history)
print("iterations:", state.iter, " wall seconds:", round(state.wall_seconds, 2))
print("log-likelihood gain, first steps:", np.round(np.diff(h)[:5], 2))
print("never decreases:", bool(np.all(np.diff(h) >= -1e-9 * np.abs(h[1:]))))
print("error from start:", round(rotation_error(truth, start), 4), "-> after EM:", round(rotation_error(truth, state.alpha), 4))

# %% [markdown]
# ## Restarts
#
# With several random starts the run with the largest final log-likelihood is
# kept.

# %%
best, states = fit(meas, meas.sigma, table, EmConfig(K=8, epsilon=cfg.epsilon, max_iters=100, n_restarts=3), rng,
                   rho0=rho_from_density(0.03, table.L, 2))
for s in states:
    print(f"loglik {s.loglik:.2f}  error {rotation_error(truth, s.alpha):.4f}")
print("kept error:", round(rotation_error(truth, best.alpha), 4))

# %% [markdown]
# The estimated shift prior puts most mass on the empty shifts, since only a
# few percent of patches meet a copy.

# %%
padding = np.array([(s // (2 * table.L) == table.L) or (s % (2 * table.L) == table.L) for s in range(4 * table.L**2)])
print("mass on empty shifts:", round(float(best.rho[padding].sum()), 4))
