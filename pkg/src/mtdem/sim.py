"""Synthetic multi-target detection measurements.

A measurement is an N x N array holding ``p`` copies of the target image,
each rotated by a uniform angle and centred at a random pixel, plus white
Gaussian noise. Copies obey the separation condition ``|l_i - l_j| > 4n``.

Randomness comes from a single ``numpy.random.Generator`` (PCG64, seeded by
``SimConfig.seed``) consumed in a fixed order: placements, rotations, noise.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .basis import synthesize

__all__ = [
    "SimConfig",
    "Measurement",
    "FormatError",
    "disk_area_pixels",
    "sigma_from_snr",
    "snr_from_sigma",
    "target_count",
    "sample_placements",
    "generate",
    "write_measurement",
    "read_measurement",
]

MAGIC = b"MTD2"
VERSION = 1


class FormatError(ValueError):
    """Raised for a malformed or unsupported measurement file."""


@dataclass
class SimConfig:
    N: int
    gamma: float = 0.04
    snr: float | None = None
    sigma: float | None = None
    seed: int = 0
    max_placement_attempts: int = 10000

    def __post_init__(self):
        if (self.snr is None) == (self.sigma is None):
            raise ValueError("give exactly one of snr and sigma")
        if self.snr is not None and not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass
class Measurement:
    """Measured pixels plus ground truth when simulated.

    ``placements`` holds ``((x, y), phi)`` with 1-based centre coordinates in
    ``{n+1, ..., N-n}``; the centre pixel is ``pixels[x - 1, y - 1]``.
    """

    N: int
    pixels: np.ndarray
    sigma: float
    placements: list = field(default_factory=list)

    @property
    def achieved_p(self):
        return len(self.placements)


def disk_area_pixels(n):
    """Number of integer offsets with ``|l| <= n``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    offs = np.arange(-n, n + 1)
    return int(np.sum(offs[:, None] ** 2 + offs[None, :] ** 2 <= n * n))


def _image_n(F):
    L = F.shape[0]
    if F.shape != (L, L) or L % 2 == 0:
        raise ValueError("image must be square with odd side")
    return L // 2


def sigma_from_snr(snr, F):
    """Noise level giving ``SNR = ||F||_F^2 / (A sigma^2)``."""
    if not snr > 0:
        raise ValueError("snr must be positive")
    energy = float(np.sum(np.asarray(F) ** 2))
    if energy == 0.0:
        raise ValueError("SNR is undefined for an all-zero image")
    A = disk_area_pixels(_image_n(F))
    return math.sqrt(energy / (A * snr))


def snr_from_sigma(sigma, F):
    A = disk_area_pixels(_image_n(F))
    return float(np.sum(np.asarray(F) ** 2)) / (A * sigma * sigma)


def target_count(N, n, gamma):
    """Number of copies ``p = floor(gamma N^2 / (pi n^2))``."""
    return int(math.floor(gamma * N * N / (math.pi * n * n)))


def sample_placements(N, n, gamma, rng, max_attempts=10000):
    """Dart-throw well-separated centres.

    Candidates are uniform on ``{n+1, ..., N-n}^2`` and rejected when within
    ``4n`` of an accepted centre. Stops after ``target_count`` acceptances or
    ``max_attempts`` consecutive rejections; the result may fall short.
    """
    L = 2 * n + 1
    if N < L:
        raise ValueError("measurement smaller than the image")
    target = target_count(N, n, gamma)
    min_sq = (4 * n) ** 2
    cell = max(4 * n, 1)
    grid = {}
    accepted = []
    misses = 0
    while len(accepted) < target and misses < max_attempts:
        x, y = (int(v) for v in rng.integers(n + 1, N - n + 1, size=2))
        cx, cy = x // cell, y // cell
        ok = True
        for i in (cx - 1, cx, cx + 1):
            for j in (cy - 1, cy, cy + 1):
                for px, py in grid.get((i, j), ()):
                    if (px - x) ** 2 + (py - y) ** 2 <= min_sq:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            accepted.append((x, y))
            grid.setdefault((cx, cy), []).append((x, y))
            misses = 0
        else:
            misses += 1
    return accepted


def generate(alpha, cfg, table):
    """Simulate a measurement of the image with coefficients ``alpha``."""
    n = table.spec.n
    F = synthesize(alpha, 0.0, table)
    sigma = cfg.sigma if cfg.sigma is not None else sigma_from_snr(cfg.snr, F)
    rng = np.random.default_rng(cfg.seed)
    centres = sample_placements(
        cfg.N, n, cfg.gamma, rng, max_attempts=cfg.max_placement_attempts
    )
    phis = rng.uniform(0.0, 2.0 * np.pi, size=len(centres))
    pixels = np.zeros((cfg.N, cfg.N))
    for (x, y), phi in zip(centres, phis):
        pixels[x - 1 - n : x + n, y - 1 - n : y + n] += synthesize(alpha, phi, table)
    if sigma > 0:
        pixels += rng.normal(0.0, sigma, size=pixels.shape)
    placements = [((x, y), float(phi)) for (x, y), phi in zip(centres, phis)]
    return Measurement(N=cfg.N, pixels=pixels, sigma=float(sigma), placements=placements)


def occupied_mask(meas, n):
    """Boolean N x N mask of the L x L windows around every placement."""
    mask = np.zeros((meas.N, meas.N), dtype=bool)
    for (x, y), _ in meas.placements:
        mask[x - 1 - n : x + n, y - 1 - n : y + n] = True
    return mask


def write_measurement(path, meas):
    """Write the little-endian ``MTD2`` binary format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIdI", VERSION, meas.N, meas.sigma, meas.achieved_p))
        for (x, y), phi in meas.placements:
            fh.write(struct.pack("<IId", x, y, phi))
        fh.write(np.ascontiguousarray(meas.pixels, dtype="<f8").tobytes())


def read_measurement(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not an MTD2 measurement (bad magic)")
    header = struct.Struct("<HIdI")
    if len(data) < 4 + header.size:
        raise FormatError(f"{path}: truncated header")
    version, N, sigma, p = header.unpack_from(data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    rec = struct.Struct("<IId")
    off = 4 + header.size
    expected = off + p * rec.size + 8 * N * N
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    placements = []
    for _ in range(p):
        x, y, phi = rec.unpack_from(data, off)
        placements.append(((x, y), phi))
        off += rec.size
    pixels = np.frombuffer(data, dtype="<f8", offset=off, count=N * N)
    return Measurement(
        N=N, pixels=pixels.reshape(N, N).astype(float), sigma=sigma, placements=placements
    )
