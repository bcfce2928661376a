"""Tensor container files.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header,
then the raw little-endian float64 payload. The header looks like::

    {"tensors": [{"name": "fc1.weight", "shape": [4, 16], "dtype": "f64",
                  "offset": 0}, ...],
     "meta": {...}}

``offset`` counts bytes from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor

_LEN = struct.Struct("<Q")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class ContainerError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def tensor_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def weights_checksum(weights: Sequence[Tensor]) -> str:
    """FNV-1a over the concatenated little-endian payload of ``weights``."""
    return f"{fnv1a64(b''.join(tensor_bytes(w) for w in weights)):016x}"


def dumps(named: Sequence[tuple], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in named:
        raw = tensor_bytes(t)
        shape = list(t.shape)
        entries.append({"name": name, "shape": shape, "dtype": "f64", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    return _LEN.pack(len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple:
    """Return ``(list of (name, Tensor), meta)``."""
    if len(blob) < _LEN.size:
        raise ContainerError("truncated container")
    (hlen,) = _LEN.unpack_from(blob)
    try:
        header = json.loads(blob[_LEN.size:_LEN.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"bad header: {exc}") from None
    payload = memoryview(blob)[_LEN.size + hlen:]
    out = []
    for entry in header.get("tensors", []):
        if entry.get("dtype") != "f64":
            raise ContainerError(f"unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise ContainerError(f"tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).astype(np.float64)
        out.append((entry["name"], Tensor(arr.reshape(shape))))
    return out, header.get("meta", {})


def save(path, named: Sequence[tuple], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(named, meta))


def load(path) -> tuple:
    return loads(Path(path).read_bytes())
