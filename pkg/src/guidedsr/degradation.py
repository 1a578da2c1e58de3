"""Observation model: Gaussian blur B, its adjoint, down-sampling D and
bicubic up-sampling (used both as the network-input interpolator and as the
back-projection operator).

All operators work on 2-D float arrays. Sampling grids are corner aligned:
low-resolution pixel ``j`` sits at high-resolution coordinate ``j * s``, so
decimation by an integer ``s`` keeps pixels ``0, s, 2s, ...`` and bicubic
resampling by ``factor`` maps output pixel ``i`` to input coordinate
``i / factor``. Keeping one convention everywhere makes cascade stages
compose exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import signal

from .errors import DomainError

FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))
MIN_EXTENT = 4
DEFAULT_LAMBDA = 2.0


def sigma_for_test_degradation(s: float) -> float:
    """Gaussian sigma whose full width at half maximum equals ``s`` pixels."""
    if not s > 1:
        raise DomainError(f"scale factor must exceed 1, got {s}")
    return s / FWHM_FACTOR


def sigma_for_cascade_stage(stage_scale: float, lam: float = DEFAULT_LAMBDA) -> float:
    """Sigma for the intermediate blur used when simulating one cascade stage.

    ``lam`` sharpens the kernel; ``lam=1`` gives the plain FWHM rule.
    """
    if not stage_scale > 1:
        raise DomainError(f"stage scale must exceed 1, got {stage_scale}")
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    return stage_scale / (2.0 * math.sqrt(2.0 * lam * math.log(2.0)))


def default_radius(sigma: float) -> int:
    return max(1, math.ceil(3.0 * sigma))


@dataclass(frozen=True)
class BlurKernel:
    taps: np.ndarray
    sigma: float

    @property
    def radius(self) -> int:
        return self.taps.shape[0] // 2


def gaussian_kernel(sigma: float, radius: Optional[int] = None) -> BlurKernel:
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    radius = default_radius(sigma) if radius is None else int(radius)
    if radius < 1:
        raise DomainError(f"kernel radius must be >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma * sigma))
    return BlurKernel(g / g.sum(), float(sigma))


def measure_fwhm(kernel: BlurKernel) -> float:
    """Full width at half maximum of the central row, linear interpolation between taps."""
    row = kernel.taps[kernel.radius]
    half = row.max() / 2.0
    r = kernel.radius
    # walk right from the centre to the first tap below half maximum
    for k in range(r, row.size - 1):
        if row[k + 1] < half <= row[k]:
            frac = (row[k] - half) / (row[k] - row[k + 1])
            return 2.0 * ((k - r) + frac)
    raise DomainError("kernel too short to contain its half-maximum crossing")


def _reflect_index(n: int, radius: int) -> np.ndarray:
    return np.pad(np.arange(n), radius, mode="symmetric")


def blur(image: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Same-size convolution with mirror (half-sample symmetric) borders."""
    image = np.asarray(image, dtype=np.float64)
    r = kernel.radius
    padded = np.pad(image, r, mode="symmetric")
    return signal.correlate(padded, kernel.taps, mode="valid")


def blur_adjoint(image: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Exact adjoint of ``blur``: full convolution, then fold the border back."""
    image = np.asarray(image, dtype=np.float64)
    r = kernel.radius
    h, w = image.shape
    full = signal.convolve(image, kernel.taps, mode="full")
    rows = np.zeros((h, full.shape[1]))
    np.add.at(rows, _reflect_index(h, r), full)
    out = np.zeros((w, h))
    np.add.at(out, _reflect_index(w, r), rows.T)
    return out.T


def output_extent(n: int, factor: float) -> int:
    """Round ``n * factor`` half-up; the result must be at least MIN_EXTENT."""
    m = int(math.floor(n * factor + 0.5))
    if m < MIN_EXTENT:
        raise DomainError(f"resampled extent {m} (from {n} x {factor:.4g}) is below {MIN_EXTENT}")
    return m


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


@lru_cache(maxsize=256)
def _bicubic_matrix(n_in: int, n_out: int, factor: float) -> np.ndarray:
    coords = np.arange(n_out) / factor
    base = np.floor(coords).astype(int)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = base + k
        wts = _cubic(coords - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wts)
    mat.setflags(write=False)
    return mat


def resample(image: np.ndarray, factor: float, out_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Bicubic (Keys, a=-0.5) resampling with replicated borders.

    ``factor > 1`` enlarges. The target shape defaults to the rounded
    ``extent * factor``.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if out_shape is None:
        out_shape = (output_extent(h, factor), output_extent(w, factor))
    my = _bicubic_matrix(h, out_shape[0], float(factor))
    mx = _bicubic_matrix(w, out_shape[1], float(factor))
    return my @ image @ mx.T


def _is_integer(s: float) -> bool:
    return abs(s - round(s)) < 1e-12


def downsample(image: np.ndarray, s: float, out_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Operator D. Integer ``s``: keep every s-th pixel after cropping each
    extent down to a multiple of ``s``. Fractional ``s``: bicubic resampling."""
    if not s > 1:
        raise DomainError(f"down-sampling factor must exceed 1, got {s}")
    image = np.asarray(image, dtype=np.float64)
    if _is_integer(s) and out_shape is None:
        k = int(round(s))
        h, w = (image.shape[0] // k) * k, (image.shape[1] // k) * k
        out = image[:h:k, :w:k]
        if min(out.shape) < MIN_EXTENT:
            raise DomainError(f"down-sampled extent {out.shape} is below {MIN_EXTENT}")
        return out.copy()
    if out_shape is not None and min(out_shape) < MIN_EXTENT:
        raise DomainError(f"down-sampled extent {out_shape} is below {MIN_EXTENT}")
    return resample(image, 1.0 / s, out_shape)


def upsample(image: np.ndarray, s: float, out_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Operator D^T: bicubic interpolation to ``round(extent * s)``."""
    if not s > 1:
        raise DomainError(f"up-sampling factor must exceed 1, got {s}")
    return resample(image, s, out_shape)


@dataclass(frozen=True)
class DegradationSpec:
    """Blur-then-down-sample model ``D(B(x))`` at one scale factor."""

    scale_factor: float
    sigma: float
    kernel_radius: int
    lam: float = 1.0

    def __post_init__(self):
        if not self.scale_factor > 1:
            raise DomainError(f"scale factor must exceed 1, got {self.scale_factor}")
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.kernel_radius < math.ceil(3 * self.sigma):
            raise DomainError(f"kernel radius {self.kernel_radius} < ceil(3 sigma) for sigma={self.sigma}")

    @classmethod
    def for_test(cls, s: float) -> "DegradationSpec":
        sigma = sigma_for_test_degradation(s)
        return cls(s, sigma, default_radius(sigma), 1.0)

    @classmethod
    def for_cascade_stage(cls, stage_scale: float, lam: float = DEFAULT_LAMBDA) -> "DegradationSpec":
        sigma = sigma_for_cascade_stage(stage_scale, lam)
        return cls(stage_scale, sigma, default_radius(sigma), lam)

    @property
    def kernel(self) -> BlurKernel:
        return gaussian_kernel(self.sigma, self.kernel_radius)

    def output_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        if _is_integer(self.scale_factor):
            k = int(round(self.scale_factor))
            return shape[0] // k, shape[1] // k
        return output_extent(shape[0], 1 / self.scale_factor), output_extent(shape[1], 1 / self.scale_factor)


def degrade(image: np.ndarray, spec: DegradationSpec,
            out_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    return downsample(blur(image, spec.kernel), spec.scale_factor, out_shape)


def format_kernel(kernel: BlurKernel) -> str:
    """Plain-text dump used by the CLI ``--dump-kernel`` flag."""
    lines = [f"# gaussian kernel sigma={kernel.sigma:.6f} radius={kernel.radius} "
             f"fwhm={measure_fwhm(kernel):.6f}"]
    lines += [" ".join(f"{v:.8e}" for v in row) for row in kernel.taps]
    return "\n".join(lines) + "\n"
