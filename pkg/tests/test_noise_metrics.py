import math

import numpy as np
import pytest

from p2s.imagecore import ImageGrid, concentric_phantom
from p2s.noise_metrics import (
    MetricReport,
    NoiseSpec,
    _poisson_array,
    make_noisy,
    poisson_draw,
    psnr,
    ssim,
)
from p2s.rng import stream


# ---------------------------------------------------------------------------
# Poisson sampling
# ---------------------------------------------------------------------------


def test_poisson_zero_mean_always_zero():
    rng = stream(0, "noise")
    assert all(poisson_draw(0.0, rng) == 0 for _ in range(100))


def test_poisson_rejects_bad_means():
    rng = stream(0, "noise")
    with pytest.raises(ValueError):
        poisson_draw(-1.0, rng)
    with pytest.raises(ValueError):
        poisson_draw(float("nan"), rng)
    with pytest.raises(ValueError):
        poisson_draw(float("inf"), rng)


def test_poisson_deterministic_given_seed():
    def sequence():
        rng = stream(42, "noise")
        return [poisson_draw(7.3, rng) for _ in range(20)]

    assert sequence() == sequence()
    draws1 = _poisson_array(np.full(50, 7.3), stream(42, "noise"))
    draws2 = _poisson_array(np.full(50, 7.3), stream(42, "noise"))
    np.testing.assert_array_equal(draws1, draws2)


def test_poisson_moment_check_mean4():
    # sample mean within 4 +- 0.006, variance within 5%
    draws = _poisson_array(np.full(10**6, 4.0), stream(7, "noise"))
    assert abs(draws.mean() - 4.0) <= 3 * (2 / 10**3)
    assert abs(draws.var() - 4.0) <= 0.05 * 4.0


@pytest.mark.parametrize("mean", [0.5, 4.0, 40.0])
def test_poisson_moments_within_one_percent(mean):
    # exercises both sampling paths (multiplication below 30, rejection above)
    draws = _poisson_array(np.full(10**6, mean), stream(11, "noise"))
    assert abs(draws.mean() - mean) <= 0.01 * mean
    assert abs(draws.var() - mean) <= 0.01 * mean


def test_poisson_small_large_split_consistent():
    # mixed-mean arrays route lanes to both samplers without index mixups
    means = np.array([0.0, 2.0, 35.0, 0.5, 60.0, 29.9, 30.1])
    draws = _poisson_array(means, stream(3, "noise"))
    assert draws[0] == 0
    assert draws.shape == means.shape
    assert (draws >= 0).all()


# ---------------------------------------------------------------------------
# make_noisy
# ---------------------------------------------------------------------------


def test_make_noisy_zero_image():
    clean = ImageGrid(np.zeros((8, 8)))
    noisy = make_noisy(clean, NoiseSpec(peak_lambda=17.0, seed=1))
    assert (noisy.data == 0.0).all()


def test_make_noisy_constant_mean():
    clean = ImageGrid(np.ones((128, 128)))
    noisy = make_noisy(clean, NoiseSpec(peak_lambda=40.0, seed=5))
    assert abs(noisy.data.mean() - 1.0) <= 0.01


def test_make_noisy_values_are_counts_over_lambda():
    clean = ImageGrid(np.full((16, 16), 0.6))
    lam = 13.0
    noisy = make_noisy(clean, NoiseSpec(peak_lambda=lam, seed=2))
    counts = noisy.data * lam
    np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
    assert (noisy.data >= 0).all()


def test_make_noisy_deterministic():
    clean = concentric_phantom(32, 32)
    a = make_noisy(clean, NoiseSpec(peak_lambda=20.0, seed=9))
    b = make_noisy(clean, NoiseSpec(peak_lambda=20.0, seed=9))
    np.testing.assert_array_equal(a.data, b.data)


def test_make_noisy_unbiased_under_averaging():
    # mean of 200 independent realizations stays within 5 sigma per pixel
    clean = concentric_phantom(48, 48)
    lam = 20.0
    acc = np.zeros(clean.shape)
    n = 200
    for s in range(n):
        acc += make_noisy(clean, NoiseSpec(peak_lambda=lam, seed=s)).data
    mean_img = acc / n
    sigma = np.sqrt(np.maximum(clean.data, 1e-12) / (lam * n))
    dev = np.abs(mean_img - clean.data)
    assert (dev[clean.data > 0] < 5 * sigma[clean.data > 0]).all()
    assert (dev[clean.data == 0] == 0).all()


def test_lower_lambda_means_lower_psnr(phantom128):
    noisy10 = make_noisy(phantom128, NoiseSpec(peak_lambda=10.0, seed=0))
    noisy40 = make_noisy(phantom128, NoiseSpec(peak_lambda=40.0, seed=0))
    assert psnr(phantom128, noisy10) < psnr(phantom128, noisy40)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(peak_lambda=0.0)
    with pytest.raises(ValueError):
        NoiseSpec(peak_lambda=-3.0)


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------


def test_psnr_identical_is_infinite(phantom128):
    assert psnr(phantom128, phantom128) == math.inf


def test_psnr_analytic_half_step():
    a = ImageGrid(np.zeros((32, 32)))
    b = ImageGrid(np.full((32, 32), 0.5))
    assert psnr(a, b, peak=1.0) == pytest.approx(10 * math.log10(4.0), abs=1e-12)


def test_psnr_matches_naive_two_loop(rng):
    a = rng.uniform(size=(17, 13))
    b = rng.uniform(size=(17, 13))
    # independent brute-force MSE
    acc = 0.0
    for r in range(17):
        for c in range(13):
            acc += (a[r, c] - b[r, c]) ** 2
    mse = acc / (17 * 13)
    expected = 10 * math.log10(1.0 / mse)
    assert psnr(ImageGrid(a), ImageGrid(b)) == pytest.approx(expected, abs=1e-12)


def test_psnr_symmetric(rng):
    a = ImageGrid(rng.uniform(size=(9, 9)))
    b = ImageGrid(rng.uniform(size=(9, 9)))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_monotone_in_noise_amplitude(rng):
    base = ImageGrid(rng.uniform(0.2, 0.8, size=(24, 24)))
    pattern = rng.standard_normal((24, 24)) * 0.05
    values = []
    for amp in (0.5, 1.0, 2.0, 4.0, 8.0):
        test = ImageGrid(base.data + amp * pattern)
        values.append(psnr(base, test))
    assert all(values[i] > values[i + 1] for i in range(len(values) - 1))


def test_psnr_shape_and_peak_validation(rng):
    a = ImageGrid(rng.uniform(size=(4, 4)))
    b = ImageGrid(rng.uniform(size=(5, 4)))
    with pytest.raises(ValueError):
        psnr(a, b)
    with pytest.raises(ValueError):
        psnr(a, a, peak=0.0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def naive_ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Explicit-loop reference: 11x11 Gaussian sigma 1.5, valid windows."""
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    g = np.arange(size) - half
    win = np.exp(-(g[:, None] ** 2 + g[None, :] ** 2) / (2 * sigma * sigma))
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for r in range(h - size + 1):
        for c in range(w - size + 1):
            wx = x[r : r + size, c : c + size]
            wy = y[r : r + size, c : c + size]
            mx = (win * wx).sum()
            my = (win * wy).sum()
            vx = (win * wx * wx).sum() - mx * mx
            vy = (win * wy * wy).sum() - my * my
            cxy = (win * wx * wy).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_self_is_exactly_one(phantom128):
    assert ssim(phantom128, phantom128) == 1.0


def test_ssim_anticorrelated_checkerboard():
    r, c = np.indices((24, 24))
    x = ((r + c) % 2).astype(np.float64)
    value = ssim(ImageGrid(x), ImageGrid(1.0 - x))
    assert value < 0.0


def test_ssim_matches_naive_reference(rng):
    for _ in range(5):
        a = rng.uniform(size=(16, 14))
        b = np.clip(a + 0.15 * rng.standard_normal((16, 14)), 0, 1)
        mine = ssim(ImageGrid(a), ImageGrid(b))
        ref = naive_ssim(a, b)
        assert mine == pytest.approx(ref, abs=1e-6)


def test_ssim_symmetric(rng):
    a = ImageGrid(rng.uniform(size=(15, 15)))
    b = ImageGrid(rng.uniform(size=(15, 15)))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_rejects_small_images():
    a = ImageGrid(np.zeros((10, 12)))
    with pytest.raises(ValueError):
        ssim(a, a)


def test_ssim_in_valid_range(rng):
    a = ImageGrid(rng.uniform(size=(20, 20)))
    b = ImageGrid(rng.uniform(size=(20, 20)))
    assert -1.0 <= ssim(a, b) <= 1.0


# ---------------------------------------------------------------------------
# MetricReport
# ---------------------------------------------------------------------------


def test_metric_report_csv_row():
    rep = MetricReport(psnr_db=31.25, ssim=0.9375)
    assert MetricReport.csv_header() == "image_id,lambda,psnr_db,ssim"
    assert rep.csv_row("phantom128", 20.0) == "phantom128,20.0,31.25,0.9375"
