"""Synthetic registered two-modality phantoms.

One label field of nested, randomly oriented ellipsoids is drawn per seed;
each modality maps the labels through its own contrast table, then both are
modulated by one shared smooth sinusoidal texture. The two volumes therefore
share anatomy exactly, and identical contrast tables give identical volumes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Volume
from .errors import ConfigurationError

BACKGROUND = 0


@dataclass
class PhantomSpec:
    seed: int = 0
    num_structures: Optional[int] = None  # None: drawn from [3, 8]
    contrast_map_a: Optional[tuple[float, ...]] = None
    contrast_map_b: Optional[tuple[float, ...]] = None
    texture_amplitude: float = 0.05
    extents: tuple[int, int, int] = (128, 128, 32)  # (W, H, D)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if len(self.extents) != 3 or min(self.extents[:2]) < 8 or self.extents[2] < 1:
            raise ConfigurationError(f"phantom extents (W, H, D) need W, H >= 8 and D >= 1, got {self.extents}")
        if self.num_structures is not None and not 1 <= self.num_structures <= 32:
            raise ConfigurationError(f"num_structures must lie in [1, 32], got {self.num_structures}")
        if self.texture_amplitude < 0:
            raise ConfigurationError("texture_amplitude must be non-negative")
        for cmap in (self.contrast_map_a, self.contrast_map_b):
            if cmap is not None and len(set(cmap)) != len(cmap):
                raise ConfigurationError("contrast maps must assign distinct intensities per label")


def _ellipsoid_params(rng: np.random.Generator, n: int):
    """Head, brain, then ``n - 2`` interior structures (sizes in normalised units)."""
    shapes = [
        (np.zeros(3), np.array([0.9, 0.92, 0.95]) * rng.uniform(0.92, 1.0, 3), rng.uniform(-0.15, 0.15)),
        (rng.uniform(-0.03, 0.03, 3), np.array([0.78, 0.82, 0.85]) * rng.uniform(0.9, 1.0, 3),
         rng.uniform(-0.2, 0.2)),
    ]
    for _ in range(max(0, n - 2)):
        axes = rng.uniform([0.06, 0.06, 0.2], [0.35, 0.35, 0.8])
        reach = 0.75 - axes[:2].max()
        centre = np.r_[rng.uniform(-reach, reach, 2), rng.uniform(-0.3, 0.3)]
        shapes.append((centre, axes, rng.uniform(0, np.pi)))
    return shapes[:n]


def label_field(spec: PhantomSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    w, h, d = (int(e) for e in spec.extents)
    z, y, x = np.meshgrid(np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    labels = np.full((d, h, w), BACKGROUND, dtype=np.int32)
    for i, (c, axes, theta) in enumerate(_ellipsoid_params(rng, n)):
        ct, st = np.cos(theta), np.sin(theta)
        xr = (x - c[0]) * ct + (y - c[1]) * st
        yr = -(x - c[0]) * st + (y - c[1]) * ct
        inside = (xr / axes[0]) ** 2 + (yr / axes[1]) ** 2 + ((z - c[2]) / axes[2]) ** 2 <= 1.0
        labels[inside] = i + 1
    return labels


def default_contrast_maps(rng: np.random.Generator, num_labels: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """T1-like map ``a`` and a roughly inverted T2-like map ``b``; background is 0 in both."""
    levels = np.linspace(40.0, 230.0, num_labels - 1)
    a = rng.permutation(levels)
    b = np.clip(270.0 - a + rng.uniform(-25, 25, a.size), 20.0, 250.0)
    # enforce injectivity of b after clipping/jitter
    while len(np.unique(np.round(b, 3))) != b.size:
        b = b + rng.uniform(-1, 1, b.size)
    return (0.0, *map(float, a)), (0.0, *map(float, b))


def _texture(rng: np.random.Generator, shape: tuple[int, int, int], n_waves: int = 4) -> np.ndarray:
    d, h, w = shape
    z, y, x = np.meshgrid(np.arange(d) / d, np.arange(h) / h, np.arange(w) / w, indexing="ij")
    tex = np.zeros(shape)
    for _ in range(n_waves):
        f = rng.uniform(0.5, 3.0, 3)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (f[0] * x + f[1] * y + 0.3 * f[2] * z) + phase)
    return tex / n_waves


def generate_labels(spec: PhantomSpec) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_structures if spec.num_structures is not None else int(rng.integers(3, 9))
    return label_field(spec, rng, n)


def generate_phantom_pair(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Deterministic (modality_a, modality_b) pair for ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_structures if spec.num_structures is not None else int(rng.integers(3, 9))
    labels = label_field(spec, rng, n)
    auto_a, auto_b = default_contrast_maps(rng, n + 1)
    map_a = np.asarray(spec.contrast_map_a if spec.contrast_map_a is not None else auto_a, dtype=np.float64)
    map_b = np.asarray(spec.contrast_map_b if spec.contrast_map_b is not None else auto_b, dtype=np.float64)
    if map_a.size < n + 1 or map_b.size < n + 1:
        raise ConfigurationError(f"contrast maps need {n + 1} entries (background + {n} structures)")
    modulation = 1.0 + spec.texture_amplitude * _texture(rng, labels.shape)
    vol_a = map_a[labels] * modulation
    vol_b = map_b[labels] * modulation
    meta = {"seed": spec.seed, "num_structures": n,
            "contrast_map_a": map_a.tolist(), "contrast_map_b": map_b.tolist()}
    return (Volume(vol_a, spec.spacing, dict(meta, modality="a")),
            Volume(vol_b, spec.spacing, dict(meta, modality="b")))
