"""Raw tensor container.

Layout (all integers little-endian)::

    b"GLTD" | u32 version (=1) | u32 rank | u64 dims[rank] | f64 payload (row-major)
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"GLTD"
VERSION = 1


class GLTDError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(blob: bytes) -> np.ndarray:
    buf = memoryview(blob)
    if len(buf) < 12 or bytes(buf[:4]) != MAGIC:
        raise GLTDError("not a GLTD blob (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise GLTDError(f"unsupported GLTD version {version}")
    offset = 12 + 8 * rank
    if len(buf) < offset:
        raise GLTDError("truncated GLTD header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise GLTDError(f"payload size {len(buf) - offset} does not match dims {dims}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())


def read_header(stream: io.BufferedIOBase) -> tuple[int, tuple[int, ...]]:
    """Read only the header of a GLTD stream; returns ``(version, dims)``."""
    head = stream.read(12)
    if len(head) < 12 or head[:4] != MAGIC:
        raise GLTDError("not a GLTD stream (bad magic)")
    version, rank = struct.unpack("<II", head[4:])
    dims = struct.unpack(f"<{rank}Q", stream.read(8 * rank))
    return version, dims
