"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"LCMF"  u32 version  u32 count
    repeated count times:
        u16 name_len  name (utf-8)  u8 dtype (0=f64, 1=f32)  u8 rank  u64 dims[rank]  payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LCMF"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {"f64": 0, "f32": 1}


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray], dtype: str = "f64") -> bytes:
    tag = _TAGS[dtype]
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, array in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        a = np.ascontiguousarray(array, dtype=_DTYPES[tag])
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", tag, a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not an LCMF checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        a = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        pos += nbytes
        arrays[name] = a.reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes")
    return arrays


def save(path: str | Path, arrays: Mapping[str, np.ndarray], dtype: str = "f64") -> None:
    Path(path).write_bytes(encode(arrays, dtype))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
