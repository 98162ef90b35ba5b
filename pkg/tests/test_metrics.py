import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionnorm.errors import ShapeError
from regionnorm.metrics import (
    PSNR_CAP_DB,
    evaluate_pair,
    gaussian_window,
    l1_percent,
    mean_psnr,
    psnr,
    ssim,
    to_luma,
)


def brute_force_ssim(a, b, window=11, sigma=1.5):
    """Windowed double-loop reference, written directly from the local
    statistics definition; shares nothing with the fast implementation."""
    x = to_luma(np.asarray(a, dtype=np.float64))
    y = to_luma(np.asarray(b, dtype=np.float64))
    half = (window - 1) / 2.0
    coords = np.arange(window) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    values = []
    for i in range(x.shape[0] - window + 1):
        for j in range(x.shape[1] - window + 1):
            px = x[i : i + window, j : j + window]
            py = y[i : i + window, j : j + window]
            mx = (w * px).sum()
            my = (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            values.append(
                ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
            )
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_identical_images_capped():
    img = np.random.default_rng(0).uniform(0, 255, (8, 8, 3))
    assert psnr(img, img) == PSNR_CAP_DB


def test_psnr_constant_difference_16():
    a = np.zeros((16, 16))
    b = np.full((16, 16), 16.0)
    npt.assert_allclose(psnr(a, b), 20.0 * np.log10(255.0 / 16.0), atol=1e-3)
    npt.assert_allclose(psnr(a, b), 24.048, atol=1e-3)


def test_psnr_full_scale_difference_is_zero_db():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 255.0)
    npt.assert_allclose(psnr(a, b), 0.0, atol=1e-12)


def test_psnr_monotone_in_constant_error():
    a = np.zeros((8, 8))
    values = [psnr(a, np.full((8, 8), d)) for d in (4.0, 8.0, 16.0, 32.0, 64.0)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_identical_images():
    img = np.random.default_rng(1).uniform(0, 255, (16, 16))
    npt.assert_allclose(ssim(img, img), 1.0, atol=1e-12)


def test_ssim_inverted_image_below_one():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 255, (16, 16))
    assert ssim(a, 255.0 - a) < 1.0


def test_ssim_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.uniform(0, 255, (16, 16, 3))
        b = rng.uniform(0, 255, (16, 16, 3))
        npt.assert_allclose(ssim(a, b), brute_force_ssim(a, b), atol=1e-6)


def test_ssim_window_guard():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11)
    npt.assert_allclose(w.sum(), 1.0, rtol=1e-12)
    npt.assert_allclose(w, w.T)


# ---------------------------------------------------------------------------
# l1 percentage


def test_l1_identical_is_zero():
    img = np.random.default_rng(4).uniform(0, 255, (8, 8, 3))
    assert l1_percent(img, img) == 0.0


def test_l1_quarter_scale():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 25.5)
    npt.assert_allclose(l1_percent(a, b), 10.0, rtol=1e-12)


def test_l1_full_scale():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 255.0)
    npt.assert_allclose(l1_percent(a, b), 100.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# shared properties


@given(st.integers(0, 2**16 - 1))
@settings(max_examples=20, deadline=None)
def test_metric_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 255, (12, 12))
    b = rng.uniform(0, 255, (12, 12))
    assert psnr(a, b) == psnr(b, a)
    assert l1_percent(a, b) == l1_percent(b, a)
    npt.assert_allclose(ssim(a, b), ssim(b, a), rtol=1e-12)


def test_evaluate_pair_identical():
    img = np.random.default_rng(5).uniform(0, 255, (16, 16, 3))
    report = evaluate_pair(img, img)
    assert report.psnr_capped
    npt.assert_allclose(report.ssim, 1.0, atol=1e-12)
    assert report.l1_percent == 0.0
    assert report.pixel_count == 256


def test_mean_psnr_excludes_capped_rows():
    mean, excluded = mean_psnr([30.0, PSNR_CAP_DB, 20.0])
    npt.assert_allclose(mean, 25.0)
    assert excluded == 1
    mean_all_capped, excluded = mean_psnr([PSNR_CAP_DB, PSNR_CAP_DB])
    assert mean_all_capped == PSNR_CAP_DB and excluded == 2
