"""LBCK checkpoint files.

Layout (little-endian): magic ``b"LBCK"``, uint32 version, then for every
tensor: uint32 name length, UTF-8 name, uint32 rank, rank × uint64 dims,
row-major float64 data. The tensor list runs to end of file.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .dataio import FormatError

MAGIC = b"LBCK"
VERSION = 1


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise FormatError("not an LBCK checkpoint")
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out, pos = {}, 8
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated tensor name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise FormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(path, tensors: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    return decode(Path(path).read_bytes())
