"""MOBT tensor snapshots.

Layout: ``b"MOBT"``, u32 LE rank, rank x u64 LE dims, row-major f64 LE payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MOBT"


class SnapshotError(ValueError):
    pass


def encode(arr) -> bytes:
    a = np.array(arr, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise SnapshotError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    off = 8 + 8 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * n:
        raise SnapshotError(f"payload is {len(buf) - off} bytes, expected {8 * n} for dims {dims}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(dims)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arr) -> None:
    atomic_write(path, encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
