"""VXT1 binary tensor files.

Layout: 4-byte magic ``VXT1``, u8 dtype code (0 = float32, 1 = float64),
u8 rank, little-endian u32 dims, then the raw little-endian payload,
row-major (last axis fastest).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"VXT1"

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class VxtError(ValueError):
    """Malformed or unsupported VXT1 data."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array to a VXT1 blob."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise VxtError(f"unsupported dtype {arr.dtype}; only float32/float64")
    if arr.ndim > 255:
        raise VxtError(f"rank {arr.ndim} exceeds format limit")
    header = MAGIC + struct.pack(
        f"<BB{arr.ndim}I", _DTYPE_TO_CODE[arr.dtype], arr.ndim, *arr.shape
    )
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one VXT1 blob starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise VxtError("bad magic; not a VXT1 tensor")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_TO_DTYPE:
        raise VxtError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    dtype = _CODE_TO_DTYPE[code]
    start = offset + 6 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise VxtError("truncated payload")
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), end


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise VxtError("trailing bytes after tensor payload")
    return arr
