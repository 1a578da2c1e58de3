"""On-disk formats.

Volume: ``<name>.json`` header plus ``<name>.raw`` payload in the same
directory. The payload is the voxel array in (z, y, x) C order as
little-endian float32. Header keys::

    format      "guidedsr-volume"
    version     1
    extents     [W, H, D]
    spacing     [dx, dy, dz] in mm
    dtype       "float32"
    byte_order  "little"
    payload     file name of the payload, relative to the header
    metadata    free-form provenance (seed, scale factor, sigma, ...)

Slices are exported as binary 16-bit PGM (P5, maxval 65535, big-endian as
the PGM format requires) with the normalisation recorded in a comment.
"""
from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import ImagePlane, Volume
from .errors import FormatError

PathLike = Union[str, Path]
FORMAT_TAG = "guidedsr-volume"
PGM_MAX = 65535


def _header_path(path: PathLike) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def write_volume(path: PathLike, volume: Volume) -> Path:
    header_path = _header_path(path)
    payload_path = header_path.with_suffix(".raw")
    header = {
        "format": FORMAT_TAG,
        "version": 1,
        "extents": list(volume.extents),
        "spacing": list(volume.spacing),
        "dtype": "float32",
        "byte_order": "little",
        "payload": payload_path.name,
        "metadata": volume.metadata,
    }
    tmp_payload = payload_path.with_name(payload_path.name + ".tmp")
    tmp_payload.write_bytes(volume.voxels.astype("<f4").tobytes())
    tmp_header = header_path.with_name(header_path.name + ".tmp")
    tmp_header.write_text(json.dumps(header, indent=2, sort_keys=True))
    os.replace(tmp_payload, payload_path)
    os.replace(tmp_header, header_path)
    return header_path


def read_volume(path: PathLike) -> Volume:
    header_path = _header_path(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{header_path}: unreadable volume header ({exc})") from exc
    if header.get("format") != FORMAT_TAG:
        raise FormatError(f"{header_path}: not a {FORMAT_TAG} header")
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise FormatError(f"{header_path}: unsupported dtype/byte order "
                          f"{header.get('dtype')}/{header.get('byte_order')}")
    w, h, d = (int(e) for e in header["extents"])
    raw = (header_path.parent / header["payload"]).read_bytes()
    expected = w * h * d * 4
    if len(raw) != expected:
        raise FormatError(f"{header_path}: payload has {len(raw)} bytes, header extents require {expected}")
    voxels = np.frombuffer(raw, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return Volume(voxels, tuple(header["spacing"]), header.get("metadata", {}))


def export_slice_image(plane, path: PathLike, normalization: str = "minmax",
                       value_range: Optional[tuple[float, float]] = None) -> tuple[float, float]:
    """Write a 16-bit PGM; returns the (lo, hi) intensity pair mapped to (0, 65535).

    ``minmax`` uses the plane's own extremes; ``fixed`` uses ``value_range``.
    A degenerate range (constant plane under min-max) maps everything to mid-level.
    """
    pixels = plane.pixels if isinstance(plane, ImagePlane) else np.asarray(plane, dtype=np.float32)
    if not np.all(np.isfinite(pixels)):
        raise FormatError("cannot export non-finite pixels")
    if normalization == "minmax":
        lo, hi = float(pixels.min()), float(pixels.max())
    elif normalization == "fixed":
        if value_range is None:
            raise ValueError("fixed normalization needs value_range")
        lo, hi = map(float, value_range)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if hi > lo:
        levels = np.rint(np.clip((pixels.astype(np.float64) - lo) / (hi - lo), 0, 1) * PGM_MAX)
    else:
        levels = np.full(pixels.shape, (PGM_MAX + 1) // 2)
    h, w = pixels.shape
    head = f"P5\n# normalization={normalization} lo={lo!r} hi={hi!r}\n{w} {h}\n{PGM_MAX}\n"
    Path(path).write_bytes(head.encode("ascii") + levels.astype(">u2").tobytes())
    return lo, hi


def read_slice_image(path: PathLike) -> tuple[np.ndarray, Optional[tuple[float, float]]]:
    """Read a PGM written by ``export_slice_image``; returns (levels, (lo, hi) or None)."""
    raw = Path(path).read_bytes()
    tokens, pos, rng = [], 0, None
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            end = raw.index(b"\n", pos)
            m = re.search(r"lo=(\S+) hi=(\S+)", raw[pos:end].decode("ascii"))
            if m:
                rng = (float(m.group(1)), float(m.group(2)))
            pos = end + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    levels = np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return levels.astype(np.int64), rng


def unnormalize(levels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + levels.astype(np.float64) / PGM_MAX * (hi - lo)
