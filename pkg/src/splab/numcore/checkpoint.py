"""Bit-exact binary checkpoints.

Layout (all little-endian): ``u32 version, u32 count``, then per parameter
``u32 name_len, name (utf-8), u32 rank, u64 extents[rank], f64 data[...]``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    version, count = struct.unpack_from("<II", buf, 0)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        if name in out:
            raise ValueError(f"duplicate parameter name {name!r} in checkpoint")
        out[name] = arr
    if off != len(buf):
        raise ValueError("trailing bytes after last parameter")
    return out
