"""Binary archive of named float arrays.

Layout (little-endian)::

    b"VHMR"  u32 version  u32 entry_count
    per entry: u32 name_len, name (UTF-8), u32 rank, u64 extents[rank], f32 payload

Checkpoints, body-model assets and dataset shards all use this container.
Integer arrays (indices, parents) round-trip exactly below 2**24.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"VHMR"
VERSION = 1


class ArchiveError(ValueError):
    pass


def save_archive(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, value in entries.items():
            arr = np.asarray(value)
            if np.issubdtype(arr.dtype, np.integer) and arr.size and np.abs(arr).max() >= 2**24:
                raise ArchiveError(f"{name}: integer values exceed float32 exact range")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ArchiveError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported format version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise ArchiveError(f"{path}: truncated archive ({exc})") from None
    return out
