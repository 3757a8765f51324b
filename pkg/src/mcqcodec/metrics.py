"""Distortion and rate-curve metrics."""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW = 11
_SIGMA = 1.5


@dataclass
class RdPoint:
    bpp: float
    psnr_db: float
    msssim_db: float


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0 ** 2 / mse))


def _gaussian_window() -> np.ndarray:
    x = np.arange(_WINDOW) - (_WINDOW - 1) / 2
    g = np.exp(-(x ** 2) / (2 * _SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = _WINDOW // 2
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    return y[half:x.shape[0] - half, half:x.shape[1] - half]


def _ssim_cs(a, b, g):
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def msssim_scales(height: int, width: int) -> int:
    """Scales usable at this size: every scale needs at least an 11x11 window."""
    scales = 0
    while scales < len(MSSSIM_WEIGHTS) and min(height, width) >> scales >= _WINDOW:
        scales += 1
    return scales


def ms_ssim(a, b) -> float:
    """Five-scale MS-SSIM (Gaussian window 11, sigma 1.5) averaged over channels.

    Images smaller than 176 pixels on a side use as many scales as fit, with
    the leading weights renormalized; :func:`msssim_scales` reports the count.
    Negative contrast terms are clipped to zero before exponentiation.
    """
    a, b = _pair(a, b)
    scales = msssim_scales(a.shape[0], a.shape[1])
    if scales == 0:
        raise ValueError("images must be at least 11 pixels on each side")
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    g = _gaussian_window()
    values = []
    for s in range(scales):
        per_channel = [_ssim_cs(a[..., c], b[..., c], g) for c in range(a.shape[2])]
        ssim_s, cs_s = np.mean(per_channel, axis=0)
        values.append(ssim_s if s == scales - 1 else cs_s)
        if s < scales - 1:
            a, b = _pool2(a), _pool2(b)
    values = np.maximum(np.asarray(values), 0.0)
    return float(np.prod(values ** weights))


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return x.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def db_convert(value: float) -> float:
    """``-10 log10(1 - value)``, capped at 99 dB as value approaches 1."""
    if value >= 1.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(1.0 - value))


def bd_rate(rate_a: Sequence[float], quality_a: Sequence[float],
            rate_b: Sequence[float], quality_b: Sequence[float]) -> float:
    """Bjontegaard delta rate of curve b relative to curve a, in percent.

    Log-rate is fitted as a cubic in quality for each curve; the fits are
    integrated over the shared quality interval.  Negative means b needs fewer
    bits for the same quality.
    """
    rate_a, quality_a, rate_b, quality_b = (
        np.asarray(v, dtype=np.float64) for v in (rate_a, quality_a, rate_b, quality_b)
    )
    for r, q in ((rate_a, quality_a), (rate_b, quality_b)):
        if r.shape != q.shape or r.ndim != 1:
            raise ValueError("rate and quality must be 1-D and equally long")
        if r.size < 4:
            raise ValueError("need at least 4 points per curve")
        if np.any(r <= 0):
            raise ValueError("rates must be positive")
    lo = max(quality_a.min(), quality_b.min())
    hi = min(quality_a.max(), quality_b.max())
    if hi <= lo:
        raise ValueError("curves have no overlapping quality range")
    fit_a = np.polyint(np.polyfit(quality_a, np.log(rate_a), 3))
    fit_b = np.polyint(np.polyfit(quality_b, np.log(rate_b), 3))
    int_a = np.polyval(fit_a, hi) - np.polyval(fit_a, lo)
    int_b = np.polyval(fit_b, hi) - np.polyval(fit_b, lo)
    return float((math.exp((int_b - int_a) / (hi - lo)) - 1.0) * 100.0)
