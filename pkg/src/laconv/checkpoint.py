"""LCKP tensor container.

Layout::

    b"LCKP" | u8 version (=1) | u32 LE header length | UTF-8 JSON header | payloads

The header is ``{"entries": [{"name", "dtype": "f32", "shape"}...], "metadata": {...}}``
and payloads are little-endian float32 buffers concatenated in entry order.
JSON is written with sorted keys so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

MAGIC = b"LCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> bytes:
    entries = []
    payloads = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "dtype": "f32", "shape": list(a.shape)})
        payloads.append(a.tobytes())
    header = json.dumps({"entries": entries, "metadata": metadata or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, bytes([VERSION]), struct.pack("<I", len(header)), header, *payloads])


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an LCKP file (bad magic)")
    if blob[4] != VERSION:
        raise CheckpointError(f"unsupported LCKP version {blob[4]}")
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    offset = 9 + hlen
    tensors = {}
    for e in header["entries"]:
        if e["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(e["shape"]).copy()
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after payloads")
    return tensors, header.get("metadata", {})


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, metadata))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
