"""PSNR and SSIM."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DataError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    dynamic_range: float


def _pair(a, b, border: int = 0) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"metric inputs differ in extent: {a.shape} vs {b.shape}")
    if border:
        a, b = a[border:-border, border:-border], b[border:-border, border:-border]
    return a, b


def psnr(a, b, dynamic_range: float, border: int = 0) -> float:
    """10 log10(range^2 / MSE); identical inputs give ``math.inf``."""
    if not dynamic_range > 0:
        raise DataError(f"dynamic range must be positive, got {dynamic_range}")
    a, b = _pair(a, b, border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(dynamic_range ** 2 / mse)


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1)
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return g


def ssim(a, b, dynamic_range: float, border: int = 0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian-window (sigma 1.5) positions."""
    a, b = _pair(a, b, border)
    if min(a.shape) < SSIM_WINDOW:
        raise DataError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    g = _gaussian_window()
    r = SSIM_WINDOW // 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[r:-r, r:-r]  # valid region only

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate(estimate, truth, dynamic_range: Optional[float] = None, border: int = 0) -> MetricReport:
    """Both metrics at one dynamic range (default: max of the ground truth)."""
    t = np.asarray(getattr(truth, "pixels", truth), dtype=np.float64)
    dr = float(t.max()) if dynamic_range is None else float(dynamic_range)
    if not dr > 0:
        raise DataError("ground truth has non-positive maximum; pass dynamic_range explicitly")
    return MetricReport(psnr(estimate, truth, dr, border), ssim(estimate, truth, dr, border), dr)
