"""Binary tensor records and named-parameter checkpoints.

Tensor record (all little-endian)::

    b"CTAN" | version:u16 | rank:u16 | extents:u64 * rank | data:f32 * prod(extents)

Checkpoint::

    count:u32 | { name_len:u16 | name:utf-8 | tensor record } * count
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CTAN"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    f.write(MAGIC)
    f.write(struct.pack("<HH", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<HH", _read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return arr


def save_checkpoint(path, params: Mapping[str, object]) -> None:
    """Write named arrays (or Tensors) in insertion order."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, getattr(value, "data", value))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(Path(path), "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate parameter {name!r}")
            out[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint records")
    return out
