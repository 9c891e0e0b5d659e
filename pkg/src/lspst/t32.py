"""T32 tensor files: ``T32\\0`` magic, u32 LE rank, rank x u32 LE dims, f32 LE data."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"T32\x00"


class T32Error(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes, source="<bytes>") -> np.ndarray:
    arr, used = decode_prefix(buf, source)
    if used != len(buf):
        raise T32Error(f"{source}: {len(buf) - used} trailing bytes after tensor data")
    return arr


def decode_prefix(buf: bytes, source="<bytes>"):
    """Decode one record from the start of ``buf``; return (array, bytes consumed)."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise T32Error(f"{source}: missing T32 magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise T32Error(f"{source}: truncated header (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = head + 4 * count
    if len(buf) < end:
        raise T32Error(f"{source}: expected {count} values for shape {dims}, file truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=head).reshape(dims)
    return arr.astype(np.float32), end


def save(path, array):
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise T32Error(f"{path}: no such file") from None
    return decode(buf, str(path))
