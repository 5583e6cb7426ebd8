"""Reader and writer for the PTNS binary tensor container.

One tensor per file, little-endian throughout:

    offset  size        field
    0       4           magic "PTNS"
    4       1           format version (currently 1)
    5       1           dtype code: 1 = float32, 2 = float64, 3 = uint8
    6       1           ndim
    7       4 * ndim    dims, u32 each, outermost first
    ...     payload     row-major (C order), last dim fastest
    end-4   4           CRC32 (zlib) of the payload bytes

Readers verify magic, version, dtype, declared size against the actual file
size, and the checksum, and fail with FormatError naming the offending path.
Writes go through a temp file in the same directory followed by an atomic
rename so a crashed write never leaves a truncated tensor behind.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, StorageError

MAGIC = b"PTNS"
VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}

_MAX_NDIM = 8


def write_ptns(path: str | os.PathLike, array: np.ndarray) -> None:
    """Serialize ``array`` to ``path`` in PTNS layout (atomic replace)."""
    path = Path(path)
    arr = np.asarray(array)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ShapeError(f"unsupported dtype for PTNS: {arr.dtype} (float32, float64 or uint8)")
    if arr.ndim == 0 or arr.ndim > _MAX_NDIM:
        raise ShapeError(f"unsupported ndim for PTNS: {arr.ndim}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise ShapeError(f"dimension too large for PTNS: {arr.shape}")

    payload = np.ascontiguousarray(arr).tobytes()
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    write_bytes_atomic(path, header + payload + crc)


def read_ptns(path: str | os.PathLike) -> np.ndarray:
    """Read one tensor back; raises FormatError on any malformed content."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read tensor file {path}: {exc}") from exc

    if len(blob) < 7:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if ndim == 0 or ndim > _MAX_NDIM:
        raise FormatError(f"{path}: bad ndim {ndim}")

    dims_end = 7 + 4 * ndim
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}I", blob, 7)
    count = 1
    for d in shape:
        count *= d
    expected = dims_end + count * dtype.itemsize + 4
    if len(blob) != expected:
        raise FormatError(f"{path}: size {len(blob)} does not match declared shape {shape} ({expected} expected)")

    payload = blob[dims_end:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(f"{path}: checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})")

    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_bytes_atomic(path: str | os.PathLike, data: bytes) -> None:
    """Write via a sibling temp file and atomic replace."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp.exists():
            try:
                tmp.unlink()
            except OSError:
                pass
