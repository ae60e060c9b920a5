"""Binary parameter checkpoints.

Layout (all integers unsigned 64-bit little-endian, values float64 little-endian)::

    b"TR2CKPT\\0" version count
    per record: name_len name_utf8 rank dim_0 .. dim_{rank-1} values...

Records are written in sorted name order so equal parameter sets give equal bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TR2CKPT\0"
VERSION = 1


def dumps(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<QQ", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<QQ", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 24
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        out[name] = vals.astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise ValueError(f"trailing bytes in checkpoint ({len(blob) - pos})")
    return out


def save(path: str | Path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
