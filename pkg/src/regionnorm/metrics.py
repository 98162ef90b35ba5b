"""Image quality metrics: PSNR, windowed SSIM, and l1 percentage.

All three operate on images in the [0, 255] range, shaped (H, W) or
(H, W, 3).  Color images are reduced to ITU-R 601 luma before SSIM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    l1_percent: float
    pixel_count: int

    @property
    def psnr_capped(self) -> bool:
        return self.psnr_db >= PSNR_CAP_DB


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 * log10(255^2 / MSE); identical images report the 100 dB cap."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP_DB)


def to_luma(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma for (H, W, 3) images; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weighting window."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _local_weighted_stats(img: np.ndarray, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and second raw moment over all valid window placements."""
    k = window.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    mu = np.tensordot(patches, window, axes=([2, 3], [0, 1]))
    raw2 = np.tensordot(patches * patches, window, axes=([2, 3], [0, 1]))
    return mu, raw2


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM with a Gaussian window over valid placements."""
    a, b = _check_pair(a, b)
    x = to_luma(a)
    y = to_luma(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"image {x.shape} smaller than SSIM window {window}")
    win = gaussian_window(window, sigma)
    mu_x, raw_xx = _local_weighted_stats(x, win)
    mu_y, raw_yy = _local_weighted_stats(y, win)
    k = win.shape[0]
    patches_x = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    patches_y = np.lib.stride_tricks.sliding_window_view(y, (k, k))
    raw_xy = np.tensordot(patches_x * patches_y, win, axes=([2, 3], [0, 1]))
    var_x = raw_xx - mu_x**2
    var_y = raw_yy - mu_y**2
    cov = raw_xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
    den = (mu_x**2 + mu_y**2 + _C1) * (var_x + var_y + _C2)
    return float(np.mean(num / den))


def l1_percent(a, b) -> float:
    """Mean absolute difference as a percentage of full scale (255)."""
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)) / 255.0 * 100.0)


def evaluate_pair(a, b) -> MetricReport:
    """All three metrics for one image pair."""
    a_arr = np.asarray(a, dtype=np.float64)
    return MetricReport(
        psnr_db=psnr(a, b),
        ssim=ssim(a, b),
        l1_percent=l1_percent(a, b),
        pixel_count=int(a_arr.shape[0] * a_arr.shape[1]),
    )


def mean_psnr(values, exclude_capped: bool = True) -> tuple[float, int]:
    """Mean PSNR over rows; capped (identical-pair) rows are excluded.

    Returns (mean, number of excluded rows).  With every row capped the
    mean is the cap itself.
    """
    values = list(values)
    capped = [v for v in values if v >= PSNR_CAP_DB]
    if exclude_capped:
        kept = [v for v in values if v < PSNR_CAP_DB]
        if not kept:
            return (PSNR_CAP_DB if values else float("nan")), len(capped)
        return float(np.mean(kept)), len(capped)
    return float(np.mean(values)), 0
