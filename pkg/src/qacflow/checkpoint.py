"""Checkpoint container.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"QACKPT\\x00\\x01"
    version    uint32    FORMAT_VERSION
    meta_len   uint64    length of the metadata blob
    meta       bytes     UTF-8 JSON object (sorted keys)
    n_records  uint64
    record * n_records:
        name_len  uint32
        name      bytes   UTF-8
        ndim      uint32
        shape     uint64 * ndim
        data      float64 * prod(shape), little-endian, C order

Records are written in sorted name order, so equal contents give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"QACKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    meta_blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta_blob)), meta_blob,
             struct.pack("<Q", len(arrays))]
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        return _loads(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None


def _loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a qacflow checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes after record {n}")
    return arrays, meta


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
