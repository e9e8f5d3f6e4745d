"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"GTER" | version | n_meta | (key_len key val_len val)* | n_arrays |
    (name_len name rank extent* float32_le_data)*

Metadata holds string key/value pairs (architecture, transform kind) used to
validate shapes on load.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GTER"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = dict(meta or {})
    parts.append(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        parts.append(_pack_str(key))
        parts.append(_pack_str(str(meta[key])))
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a GTER checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = {}
    for _ in range(r.u32()):
        key = r.string()
        meta[key] = r.string()
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        arrays[name] = data.reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return arrays, meta


def save(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
