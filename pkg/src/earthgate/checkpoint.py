"""Binary checkpoint container.

Layout (little-endian)::

    magic    8 bytes  b"EGCKPT\\0\\0"
    version  u32
    length   u64      payload byte count
    sha256   32 bytes of the payload
    payload  u32 meta length, canonical JSON metadata,
             u32 tensor count, then per tensor (sorted by name):
             u16 name length, utf-8 name, u8 ndim, u32 dims..., f64 data
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EGCKPT\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def encode_checkpoint(meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return _HEADER.pack(MAGIC, VERSION, len(payload), hashlib.sha256(payload).digest()) + payload


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size:
        raise CheckpointIntegrityError("checkpoint shorter than its header")
    magic, version, length, digest = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointIntegrityError("not an earthgate checkpoint")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    payload = blob[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointIntegrityError(f"payload is {len(payload)} bytes, header says {length}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError("checksum mismatch")
    (meta_len,) = struct.unpack_from("<I", payload, 0)
    off = 4
    meta = json.loads(payload[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<B", payload, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(payload):
        raise CheckpointIntegrityError("trailing bytes after tensor table")
    return meta, arrays


def save_checkpoint(path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    blob = encode_checkpoint(meta, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
