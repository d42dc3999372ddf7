"""Flat binary parameter container.

Layout: 8-byte magic "LAPCKPT1", then per-tensor records of
(name length u64 LE, UTF-8 name, rank u64 LE, extents u64 LE each,
values f64 LE row-major) until end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LAPCKPT1"


class CheckpointError(IOError):
    """Malformed or truncated parameter container."""


def save_arrays(path, arrays: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<Q", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.astype("<f8").tobytes())
    tmp.replace(path)


def load_arrays(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    arrays = {}
    off = 8
    total = len(data)
    while off < total:
        (nlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<Q", data, off)
        off += 8
        shape = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        end = off + 8 * count
        if end > total:
            raise CheckpointError(f"{path}: truncated record for {name!r}")
        arrays[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    return arrays
