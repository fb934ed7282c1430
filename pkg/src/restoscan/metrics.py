"""Image-quality metrics on [0,1] arrays: PSNR and SSIM."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DimensionError

PSNR_CAP = 99.0   # sentinel for identical images; keeps CSV finite


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def psnr(a, b):
    """10*log10(1/mse) in dB, capped at PSNR_CAP for (near-)identical inputs."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, k1=0.01, k2=0.03):
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5).

    Computed on valid window positions only and averaged over channels;
    the data range is taken to be 1.
    """
    a = _as_array(a).astype(np.float64)
    b = _as_array(b).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w, _ = a.shape
    size = 11
    if h < size or w < size:
        raise DimensionError(f"ssim needs extents >= {size}, got {h}x{w}")
    win = _gaussian_window(size)
    c1 = k1 ** 2
    c2 = k2 ** 2

    def filt(img):
        # (H-10, W-10, C): Gaussian-weighted mean over each valid window.
        v = sliding_window_view(img, (size, size), axis=(0, 1))
        return np.einsum("hwcij,ij->hwc", v, win, optimize=True)

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
