"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"POQT"                      magic
    u32                          format version
    u32                          tensor count
    per tensor:
        u32 name length, UTF-8 name
        u32 rank, rank x u64 extents
        prod(extents) x float32 values
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = b"POQT"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf)
    magic = buf[:4]
    if len(buf) >= 4 and magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (count,) = r.unpack("<I")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        out[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def save_checkpoint(model, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_tensors(model.state_dict()))


def read_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())


def load_checkpoint(path: Union[str, Path], model):
    """Load tensors from ``path`` into ``model`` (built from a matching config)."""
    model.load_state_dict(read_checkpoint(path))
    return model
