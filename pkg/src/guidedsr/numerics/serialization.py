"""Parameter file format.

Layout (all integers little-endian)::

    8 bytes   magic  b"GSRPARAM"
    8 bytes   uint64 length L of the JSON manifest
    L bytes   UTF-8 JSON manifest
    rest      float32 payload, little-endian, arrays back to back in manifest order

The manifest holds ``{"arrays": [{"name", "shape", "offset"}...], "meta": {...}}``
where ``offset`` counts float32 elements from the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from ..errors import FormatError

MAGIC = b"GSRPARAM"


def save_arrays(path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape))
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_arrays(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a parameter file (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    payload = np.frombuffer(raw[16 + mlen:], dtype="<f4")
    expected = sum(int(np.prod(e["shape"])) for e in manifest["arrays"])
    if payload.size != expected or (len(raw) - 16 - mlen) % 4:
        raise FormatError(
            f"{path}: payload holds {len(raw) - 16 - mlen} bytes, manifest requires {expected * 4}")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"]))
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + n].astype(np.float32).reshape(e["shape"])
    return arrays, manifest.get("meta", {})
