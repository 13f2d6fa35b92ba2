# %% [markdown]
# # Simulating a measurement
#
# A measurement is an N x N array holding many randomly rotated copies of one
# small image, placed far enough apart that no two copies touch, plus white
# Gaussian noise scaled to a requested SNR.

# %%
import tempfile
from pathlib import Path

import numpy as np

from mtdem.basis import build_basis, build_index_set, random_image_coeffs, synthesize
from mtdem.sim import SimConfig, generate, occupied_mask, read_measurement, snr_from_sigma, write_measurement

table = build_basis(build_index_set(2, 10, real_dim=True))
alpha = random_image_coeffs(table, np.random.default_rng(1))

# %%
meas = generate(alpha, SimConfig(N=300, gamma=0.04, snr=5.0, seed=7), table)
print("copies placed:", meas.achieved_p)
print("noise sigma:", round(meas.sigma, 4))
print("first placements (1-based centre, angle):", [(p, round(phi, 3)) for p, phi in meas.placements[:3]])

# %% [markdown]
# The SNR can be read back from the noise level of the pixels that no copy
# touches.

# %%
free = meas.pixels[~occupied_mask(meas, 2)]
sigma_hat = float(np.sqrt(np.mean(free**2)))
print("estimated SNR:", round(snr_from_sigma(sigma_hat, synthesize(alpha, 0.0, table)), 3))

# %% [markdown]
# ## The MTD2 file format
#
# Measurements are stored in a small little-endian binary format, and a round
# trip is lossless.

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "m.mtd2"
    write_measurement(path, meas)
    back = read_measurement(path)
    print("bytes on disk:", path.stat().st_size)
    print("identical pixels:", np.array_equal(back.pixels, meas.pixels))
    print("identical placements:", back.placements == meas.placements)
