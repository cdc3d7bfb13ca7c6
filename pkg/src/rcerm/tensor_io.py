"""Binary tensor container files.

Layout: magic ``RCT1``, u32 little-endian rank, ``rank`` u32 little-endian
extents, then the float64 little-endian row-major payload. Round-trips are
bit-exact; anything else on disk is rejected with :class:`FormatError`.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import ContractError, FormatError

MAGIC = b"RCT1"
_MAX_RANK = 8


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.size == 0:
        raise ContractError(f"refusing to write empty tensor of shape {arr.shape}")
    if arr.ndim > _MAX_RANK:
        raise ContractError(f"rank {arr.ndim} exceeds container limit {_MAX_RANK}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", blob[4:8])
    if rank == 0 or rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated extents")
    extents = struct.unpack(f"<{rank}I", blob[8:header_end])
    if any(e == 0 for e in extents):
        raise FormatError(f"{path}: zero extent in {extents}")
    count = int(np.prod(extents, dtype=np.int64))
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - header_end} bytes, expected {8 * count}")
    flat = np.frombuffer(blob, dtype="<f8", offset=header_end, count=count)
    return flat.astype(np.float64).reshape(extents)
