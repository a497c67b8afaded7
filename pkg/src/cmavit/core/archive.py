"""Flat binary archive of named fp64 arrays.

Layout (all integers little-endian)::

    b"CMAVIT1"                     7-byte magic
    u32  record count
    per record:
      u32  name length in bytes, then the UTF-8 name
      u32  ndim, then ndim x u64 extents
      prod(extents) x f64 payload, row-major

Records are written in the order given, so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from cmavit.errors import DataError

MAGIC = b"CMAVIT1"


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError("not a CMAVIT1 archive (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataError("truncated archive")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise DataError(f"duplicate record {name!r}")
        out[name] = data
    if pos != len(blob):
        raise DataError("trailing bytes after last record")
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
