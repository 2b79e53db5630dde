"""Forecast and image-quality metrics plus code-usage perplexity."""
from __future__ import annotations

import math

import numpy as np

from .errors import DataError, ParameterError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(pred, target, max_val=1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs match."""
    if max_val <= 0:
        raise ParameterError("max_val must be positive")
    err = mse(pred, target)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / err)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' Gaussian filtering over the last two axes."""
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def ssim(pred, target, data_range=1.0) -> float:
    """Mean SSIM over all 11x11 windows of every frame in the last two axes.

    Leading axes (batch, time, channel) are treated as independent frames.
    """
    pred, target = _pair(pred, target)
    if pred.ndim < 2:
        raise ShapeError("ssim needs at least 2-D frames")
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ParameterError(f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape[-2:]}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _filter_valid(pred, g)
    my = _filter_valid(target, g)
    sxx = _filter_valid(pred * pred, g) - mx * mx
    syy = _filter_valid(target * target, g) - my * my
    sxy = _filter_valid(pred * target, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def perplexity_from_counts(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 1.0
    used = counts[counts > 0]
    if np.all(used == used[0]):
        return float(used.size)  # uniform usage: exp(ln k) would round away from k
    p = used / total
    return float(math.exp(-np.sum(p * np.log(p))))


def index_perplexity(indices, n) -> float:
    idx = np.asarray(indices).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DataError(f"indices must lie in [0, {n})")
    return perplexity_from_counts(np.bincount(idx.astype(np.int64), minlength=n))
