"""VDCT tensor files and directory bundles.

A VDCT file is the 8-byte magic ``VDCT0001``, a little-endian u32 rank, one
u32 per extent, a u8 dtype code (0 = float64, 1 = float32) and the row-major
little-endian payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"VDCT0001"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {"f64": 0, "f32": 1}


class FormatError(ValueError):
    pass


def encode_tensor(array: Any, dtype: str = "f64") -> bytes:
    code = _CODES[dtype]
    arr = np.asarray(array, dtype=_DTYPES[code])
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + struct.pack("<B", code) + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:8] != MAGIC:
        raise FormatError(f"bad magic {blob[:8]!r}")
    (rank,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    (code,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != count * dt.itemsize:
        raise FormatError(f"payload holds {len(blob) - offset} bytes, expected {count * dt.itemsize}")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(shape)
    return arr.astype(np.float64)


def write_tensor(path: str | os.PathLike, array: Any, dtype: str = "f64") -> Path:
    path = Path(path)
    path.write_bytes(encode_tensor(array, dtype))
    return path


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_json(path: str | os.PathLike, obj: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def save_bundle(directory: str | os.PathLike, tensors: Mapping[str, Any], manifest: Mapping[str, Any]) -> Path:
    """Write each tensor as ``<name>.vdct`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        write_tensor(directory / f"{name}.vdct", arr)
    write_json(directory / "manifest.json", {**manifest, "tensors": sorted(tensors)})
    return directory


def load_bundle(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: read_tensor(directory / f"{name}.vdct") for name in manifest["tensors"]}
    return tensors, manifest


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
