"""Full-image PSNR and SSIM for images in [0, 1] (no border cropping)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kpdeblur.errors import ParameterError

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size=11, sigma=1.5):
    r = size // 2
    g = np.exp(-((np.arange(size) - r) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable weighted sums over every full window position
    rows = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(rows, g.size, axis=-1) @ g


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Mean structural similarity over channels and valid window positions.

    Accepts ``[H,W]`` or ``[C,H,W]`` arrays.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ParameterError(f"expected [H,W] or [C,H,W] images, got shape {a.shape}")
    if min(a.shape[-2:]) < size:
        raise ParameterError(f"image {a.shape[-2:]} smaller than the {size}x{size} window")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    g = gaussian_window(size, sigma)
    ma, mb = _filter_valid(a, g), _filter_valid(b, g)
    va = _filter_valid(a * a, g) - ma * ma
    vb = _filter_valid(b * b, g) - mb * mb
    cov = _filter_valid(a * b, g) - ma * mb
    num = (2 * ma * mb + c1) * (2 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    return float(np.mean(num / den))
