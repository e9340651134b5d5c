"""Portable checkpoint files.

Layout (all integers little-endian u32)::

    b"MMSACKPT" | version | n_groups
    per group:  name_len | name (utf-8) | n_tensors
    per tensor: rank | dims[rank] | f64 LE payload (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import ParamGroup

MAGIC = b"MMSACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_bytes(groups) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(groups))]
    for g in groups:
        name = g.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", len(g)))
        for t in g:
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
    return b"".join(parts)


def load_bytes(buf: bytes) -> dict[str, list[np.ndarray]]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not an MMSA checkpoint (bad magic)")
    off = 8

    def u32():
        nonlocal off
        if off + 4 > len(buf):
            raise CheckpointError("truncated checkpoint")
        (v,) = struct.unpack_from("<I", buf, off)
        off += 4
        return v

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(u32()):
        n = u32()
        name = buf[off:off + n].decode("utf-8")
        off += n
        arrays = []
        for _ in range(u32()):
            rank = u32()
            dims = tuple(u32() for _ in range(rank))
            count = int(np.prod(dims)) if rank else 1
            if off + 8 * count > len(buf):
                raise CheckpointError("truncated checkpoint payload")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
            off += 8 * count
            arrays.append(arr)
        out[name] = arrays
    if off != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path, groups) -> None:
    Path(path).write_bytes(dump_bytes(groups))


def load_checkpoint(path) -> dict[str, list[np.ndarray]]:
    return load_bytes(Path(path).read_bytes())


def restore_groups(groups, arrays: dict[str, list[np.ndarray]]) -> None:
    for g in groups:
        if g.name not in arrays:
            raise CheckpointError(f"checkpoint has no group {g.name!r}")
        vals = arrays[g.name]
        if len(vals) != len(g):
            raise CheckpointError(f"group {g.name!r}: expected {len(g)} tensors, found {len(vals)}")
        for t, v in zip(g, vals):
            if t.shape != v.shape:
                raise CheckpointError(f"{t.name}: shape {v.shape} in file, {t.shape} in model")
            t.data = v.copy()


__all__ = ["ParamGroup", "save_checkpoint", "load_checkpoint", "restore_groups", "dump_bytes", "load_bytes"]
