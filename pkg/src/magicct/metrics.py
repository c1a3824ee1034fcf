"""Image-quality metrics: PSNR, SSIM and rectangular ROI statistics."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InputError

__all__ = ["IDENTICAL", "psnr", "format_psnr", "ssim", "roi_stats", "gaussian_window"]

# PSNR of two identical images; formatted as "identical" in reports.
IDENTICAL = math.inf


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise InputError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if pred.ndim != 2:
        raise InputError(f"expected 2-D images, got {pred.ndim}-D")
    return pred, ref


def _default_range(ref):
    span = float(ref.max() - ref.min())
    if not span > 0:
        raise InputError("reference image is constant; pass an explicit peak / dynamic range")
    return span


def psnr(pred, ref, peak: float | None = None) -> float:
    """``10 log10(peak^2 / MSE)`` in dB.

    ``peak`` defaults to the dynamic range ``max(ref) - min(ref)``.  Returns
    :data:`IDENTICAL` (``inf``) when the images are equal.
    """
    pred, ref = _pair(pred, ref)
    peak = _default_range(ref) if peak is None else float(peak)
    if not peak > 0:
        raise InputError("peak must be positive")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def format_psnr(value: float) -> str:
    return "identical" if value == IDENTICAL else f"{value:.6f}"


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img, taps):
    h = len(taps) // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(pred, ref, data_range: float | None = None, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all positions where the window fits.

    Local statistics use a Gaussian window; ``data_range`` follows the same
    default as :func:`psnr`.
    """
    pred, ref = _pair(pred, ref)
    if min(pred.shape) < win_size:
        raise InputError(f"images {pred.shape} are smaller than the {win_size}x{win_size} window")
    rng_ = _default_range(ref) if data_range is None else float(data_range)
    if not rng_ > 0:
        raise InputError("data range must be positive")
    taps = gaussian_window(win_size, sigma)
    mx = _filter_valid(pred, taps)
    my = _filter_valid(ref, taps)
    sxx = _filter_valid(pred * pred, taps) - mx * mx
    syy = _filter_valid(ref * ref, taps) - my * my
    sxy = _filter_valid(pred * ref, taps) - mx * my
    c1 = (k1 * rng_) ** 2
    c2 = (k2 * rng_) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def roi_stats(img, roi) -> tuple[float, float]:
    """Sample mean and SD (``n - 1`` normalisation) over ``roi = (row, col, height, width)``.

    A single-pixel ROI has SD ``nan``.
    """
    img = np.asarray(img, dtype=np.float64)
    r, c, h, w = (int(v) for v in roi)
    if h <= 0 or w <= 0:
        raise InputError(f"empty roi {roi}")
    if r < 0 or c < 0 or r + h > img.shape[0] or c + w > img.shape[1]:
        raise InputError(f"roi {roi} lies outside the {img.shape} image")
    vals = img[r:r + h, c:c + w]
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
    return mean, sd
