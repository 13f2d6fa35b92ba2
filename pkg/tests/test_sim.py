import itertools
import math

import numpy as np
import pytest

from mtdem.basis import CoeffVec, build_basis, build_index_set, random_image_coeffs, synthesize
from mtdem.sim import (
    FormatError,
    Measurement,
    SimConfig,
    disk_area_pixels,
    generate,
    occupied_mask,
    read_measurement,
    sample_placements,
    sigma_from_snr,
    snr_from_sigma,
    target_count,
    write_measurement,
)


@pytest.fixture(scope="module")
def table():
    return build_basis(build_index_set(2, 10, real_dim=True))


@pytest.fixture(scope="module")
def alpha(table):
    return random_image_coeffs(table, np.random.default_rng(11))


def enumerate_disk(n):
    return sum(1 for x in range(-n, n + 1) for y in range(-n, n + 1) if x * x + y * y <= n * n)


@pytest.mark.parametrize("n,expected", [(0, 1), (1, 5), (2, 13)])
def test_disk_area_examples(n, expected):
    assert disk_area_pixels(n) == expected == enumerate_disk(n)


@pytest.mark.parametrize("n", range(3, 12))
def test_disk_area_enumeration(n):
    assert disk_area_pixels(n) == enumerate_disk(n)


def test_sigma_from_snr_example():
    F = np.zeros((5, 5))
    F[2, 2] = 10.0
    assert math.isclose(sigma_from_snr(2.0, F), math.sqrt(100 / 26), rel_tol=1e-14)
    assert abs(sigma_from_snr(2.0, F) - 1.96116) < 1e-5


def test_sigma_from_snr_roundtrip_and_limit():
    F = np.random.default_rng(0).uniform(size=(5, 5))
    for s in (0.1, 2.0, 50.0, 1e6):
        assert abs(snr_from_sigma(sigma_from_snr(s, F), F) - s) < 1e-12 * s
    assert sigma_from_snr(1e30, F) < 1e-14


def test_sigma_from_snr_errors():
    with pytest.raises(ValueError):
        sigma_from_snr(1.0, np.zeros((5, 5)))
    with pytest.raises(ValueError):
        sigma_from_snr(0.0, np.ones((5, 5)))


def test_target_count_example():
    assert target_count(100, 2, 0.04) == 31


def check_placements(pts, N, n):
    for x, y in pts:
        assert n + 1 <= x <= N - n and n + 1 <= y <= N - n
    for (a, b), (c, d) in itertools.combinations(pts, 2):
        assert (a - c) ** 2 + (b - d) ** 2 > 16 * n * n


def test_placements_single():
    n, N = 2, 60
    gamma = 1.5 * math.pi * n * n / N**2
    pts = sample_placements(N, n, gamma, np.random.default_rng(0))
    assert len(pts) == 1
    check_placements(pts, N, n)


def test_placements_dense_example():
    pts = sample_placements(100, 2, 0.04, np.random.default_rng(1))
    assert len(pts) <= 31
    assert len(pts) == 31  # far from packing, dart throwing reaches the target
    check_placements(pts, 100, 2)


def test_placements_shortfall_reported():
    # an impossible density stops on consecutive rejections
    pts = sample_placements(30, 2, 0.9, np.random.default_rng(2), max_attempts=200)
    assert 0 < len(pts) < target_count(30, 2, 0.9)
    check_placements(pts, 30, 2)


def test_simconfig_validation():
    with pytest.raises(ValueError):
        SimConfig(N=50)
    with pytest.raises(ValueError):
        SimConfig(N=50, snr=1.0, sigma=1.0)
    with pytest.raises(ValueError):
        SimConfig(N=50, snr=1.0, gamma=0.0)


def test_generate_single_copy_noiseless(table, alpha):
    n = 2
    N = 40
    cfg = SimConfig(N=N, gamma=1.2 * math.pi * n * n / N**2, sigma=0.0, seed=5)
    meas = generate(alpha, cfg, table)
    assert meas.achieved_p == 1
    (x, y), phi = meas.placements[0]
    window = meas.pixels[x - 1 - n : x + n, y - 1 - n : y + n]
    assert np.array_equal(window, synthesize(alpha, phi, table))
    rest = meas.pixels.copy()
    rest[x - 1 - n : x + n, y - 1 - n : y + n] = 0
    assert np.all(rest == 0)


def test_generate_windows_and_disjointness(table, alpha):
    n = 2
    meas = generate(alpha, SimConfig(N=150, sigma=0.0, seed=6), table)
    assert meas.achieved_p > 10
    for (x, y), phi in meas.placements:
        window = meas.pixels[x - 1 - n : x + n, y - 1 - n : y + n]
        assert np.array_equal(window, synthesize(alpha, phi, table))
    cleared = meas.pixels.copy()
    cleared[occupied_mask(meas, n)] = 0
    assert np.all(cleared == 0)


def test_generate_pure_noise_variance(table):
    zero = CoeffVec.zeros(table.spec)
    sigma = 1.7
    N = 300
    meas = generate(zero, SimConfig(N=N, sigma=sigma, seed=7), table)
    var = meas.pixels.var()
    stderr = sigma**2 * math.sqrt(2.0 / (N * N))
    assert abs(var - sigma**2) < 3 * stderr


def test_generate_deterministic(table, alpha):
    cfg = SimConfig(N=120, snr=3.0, seed=8)
    a = generate(alpha, cfg, table)
    b = generate(alpha, cfg, table)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.placements == b.placements
    c = generate(alpha, SimConfig(N=120, snr=3.0, seed=9), table)
    assert not np.array_equal(a.pixels, c.pixels)


def test_generate_rotations_continuous(table, alpha):
    meas = generate(alpha, SimConfig(N=200, sigma=0.0, seed=10), table)
    phis = np.array([phi for _, phi in meas.placements])
    assert np.all((phis >= 0) & (phis < 2 * np.pi))
    assert len(np.unique(np.round(phis, 6))) == len(phis)


def test_measurement_roundtrip(tmp_path, table, alpha):
    meas = generate(alpha, SimConfig(N=64, snr=2.0, seed=12), table)
    path = tmp_path / "m.mtd2"
    write_measurement(path, meas)
    raw = path.read_bytes()
    assert raw[:4] == b"MTD2"
    assert len(raw) == 4 + 2 + 4 + 8 + 4 + meas.achieved_p * 16 + 8 * 64 * 64
    back = read_measurement(path)
    assert back.N == meas.N and back.sigma == meas.sigma
    assert back.placements == meas.placements
    assert np.array_equal(back.pixels, meas.pixels)
    write_measurement(tmp_path / "again.mtd2", back)
    assert (tmp_path / "again.mtd2").read_bytes() == raw


def test_measurement_bad_magic_and_version(tmp_path):
    meas = Measurement(N=2, pixels=np.zeros((2, 2)), sigma=1.0)
    path = tmp_path / "m.mtd2"
    write_measurement(path, meas)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.mtd2"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_measurement(bad)
    raw[4] = 9
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_measurement(bad)
    bad.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_measurement(bad)
