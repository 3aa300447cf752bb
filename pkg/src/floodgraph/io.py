"""File containers shared across the pipeline.

Two kinds of artifacts exist: JSON documents (meshes "FGM", hydrograph
catalogues "FGH") and binary containers in the "FGB" style (state sequences,
graphs "FGG", model checkpoints "FGP").  Everything written here is
deterministic: JSON keys are sorted, floats are printed with 17 significant
digits, and binary blocks are little-endian with fixed layouts, so re-running
a command with the same inputs produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Any, BinaryIO

import numpy as np

FGB_MAGIC = b"FGB1"
FGG_MAGIC = b"FGG1"
FGP_MAGIC = b"FGP1"
FGB_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not match its declared container format."""


# ---------------------------------------------------------------------------
# Deterministic JSON with 17-significant-digit floats
# ---------------------------------------------------------------------------

def _format_value(obj: Any) -> str:
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise FormatError(f"non-finite float {x!r} cannot be serialized")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _format_value(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_format_value(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(json.dumps(str(k)) + ":" + _format_value(v) for k, v in items) + "}"
    raise FormatError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj: Any) -> str:
    """Serialize to canonical JSON: sorted keys, floats at 17 significant digits."""
    return _format_value(obj)


def loads_json(text: str) -> Any:
    return json.loads(text)


# ---------------------------------------------------------------------------
# FGB-style binary containers
# ---------------------------------------------------------------------------

def write_header(fh: BinaryIO, magic: bytes, meta: dict) -> None:
    blob = dumps_json(meta).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<I", FGB_VERSION))
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def read_header(fh: BinaryIO, magic: bytes) -> dict:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FGB_VERSION:
        raise FormatError(f"unsupported container version {version}")
    (n,) = struct.unpack("<Q", fh.read(8))
    return loads_json(fh.read(n).decode("utf-8"))


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr)
    fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(fh: BinaryIO, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise FormatError("truncated array block")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
