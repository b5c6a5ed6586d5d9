"""Image and depth quality metrics."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_IDENTICAL = 99.0


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr_flagged(a, b) -> tuple[float, bool]:
    """PSNR in dB for images in [0, 1]; identical images give (99, True)."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL, True
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_IDENTICAL), False


def psnr(a, b) -> float:
    return psnr_flagged(a, b)[0]


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, *, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0):
    """Single-scale SSIM averaged over valid window positions and channels.

    Accepts (H, W) or (H, W, C) images.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < win or a.shape[1] < win:
        raise MetricError(f"image {a.shape[:2]} smaller than the {win}x{win} window")
    w = gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        # (H', W', C, win, win) windows, weighted sum over the window axes
        return np.einsum("ijckl,kl->ijc", sliding_window_view(x, (win, win), axis=(0, 1)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def depth_mae(pred, oracle, mask=None) -> float:
    """Mean absolute depth error over ``mask``; NaN when the mask is empty."""
    pred, oracle = _pair(pred, oracle)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise MetricError("mask shape mismatch")
    if not mask.any():
        return float("nan")
    return float(np.mean(np.abs(pred[mask] - oracle[mask])))
