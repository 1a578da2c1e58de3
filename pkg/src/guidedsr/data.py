"""Image containers and patch extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError


@dataclass
class ImagePlane:
    """A 2-D slice. ``pixels`` has shape (height, width)."""

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise DataError(f"ImagePlane needs a 2-D array, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError("ImagePlane contains non-finite pixels")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Volume:
    """A stack of slices. ``voxels`` has shape (depth, height, width);
    ``spacing`` is (dx, dy, dz) in millimetres."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DataError(f"Volume needs a 3-D array, got shape {self.voxels.shape}")
        self.spacing = tuple(float(v) for v in self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        d, h, w = self.voxels.shape
        return w, h, d

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def slice(self, k: int) -> ImagePlane:
        return ImagePlane(self.voxels[k], self.spacing[:2])

    @classmethod
    def from_slices(cls, planes: Sequence[np.ndarray], spacing=(1.0, 1.0, 1.0), metadata=None) -> "Volume":
        return cls(np.stack([np.asarray(p) for p in planes]), spacing, dict(metadata or {}))


def grid_patch_coords(shape: tuple[int, int], size: int, stride: int) -> list[tuple[int, int]]:
    h, w = shape
    if size > h or size > w:
        raise DataError(f"patch size {size} exceeds plane extents {shape}")
    return [(y, x) for y in range(0, h - size + 1, stride) for x in range(0, w - size + 1, stride)]


def random_patch_coords(shape: tuple[int, int], size: int, count: int,
                        rng: np.random.Generator) -> list[tuple[int, int]]:
    h, w = shape
    if size > h or size > w:
        raise DataError(f"patch size {size} exceeds plane extents {shape}")
    ys = rng.integers(0, h - size + 1, size=count)
    xs = rng.integers(0, w - size + 1, size=count)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def crop(image: np.ndarray, coord: tuple[int, int], size: int) -> np.ndarray:
    y, x = coord
    return image[y:y + size, x:x + size]


def extract_patches(plane, size: int, stride: Optional[int] = None, count: Optional[int] = None,
                    seed: Optional[int] = None) -> list[ImagePlane]:
    """Grid patches (``stride``) or seeded random patches (``count`` + ``seed``).

    To keep several registered planes aligned, compute the coordinates once
    with ``grid_patch_coords``/``random_patch_coords`` and ``crop`` each plane.
    """
    if not isinstance(plane, ImagePlane):
        plane = ImagePlane(np.asarray(plane))
    img = plane.pixels
    if count is not None:
        coords = random_patch_coords(img.shape, size, count, np.random.default_rng(seed))
    else:
        coords = grid_patch_coords(img.shape, size, stride or size)
    return [ImagePlane(crop(img, c, size).copy(), plane.spacing) for c in coords]
