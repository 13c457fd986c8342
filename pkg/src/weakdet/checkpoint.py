"""Binary checkpoint format ("WBX1").

All integers little-endian::

    b"WBX1"  u16 version  u32 tensor_count
    per tensor:  u16 name_len, name (UTF-8), u8 rank, u32 dims[rank],
                 float32 payload (row-major)
    u32 scalar_count
    per scalar:  u16 name_len, name (UTF-8), float64 value
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"WBX1"
VERSION = 1


def _name(buf, name):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long: {name[:40]}...")
    buf += struct.pack("<H", len(raw)) + raw


def dumps(tensors, scalars):
    """Serialize ``tensors`` (iterable of (name, array)) and ``scalars``
    (mapping name -> float) to bytes."""
    tensors = list(tensors)
    buf = bytearray(MAGIC)
    buf += struct.pack("<HI", VERSION, len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr)
        _name(buf, name)
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", len(scalars))
    for name, value in scalars.items():
        _name(buf, name)
        buf += struct.pack("<d", float(value))
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def loads(data):
    """Inverse of :func:`dumps`: returns ``(tensors dict, scalars dict)``,
    both in file order."""
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError("not a WBX1 checkpoint")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    pos = 4
    version, count = struct.unpack_from("<HI", data, pos)
    pos += 6
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def read_name():
        nonlocal pos
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        return name

    try:
        tensors = {}
        for _ in range(count):
            name = read_name()
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32).reshape(dims)
        (n_scalars,) = struct.unpack_from("<I", data, pos)
        pos += 4
        scalars = {}
        for _ in range(n_scalars):
            name = read_name()
            (scalars[name],) = struct.unpack_from("<d", data, pos)
            pos += 8
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if pos != len(data) - 4:
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, scalars


def save(path, tensors, scalars):
    Path(path).write_bytes(dumps(tensors, scalars))


def load(path):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint {path}") from e
    return loads(data)
