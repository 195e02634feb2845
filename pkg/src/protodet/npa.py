"""Minimal binary array container ("NPA").

Layout: magic ``NPA1``, one uint8 dtype code (1 = float32, 2 = int32), one
uint8 ndim, ndim little-endian uint32 shape entries, then the row-major
little-endian payload. Arrays round-trip bit-exactly, so alternate
implementations of the same on-disk format interoperate.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NPA1"

_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
_CODE_BY_DTYPE = {np.dtype("<f4"): 1, np.dtype("<i4"): 2}


class NpaError(ValueError):
    """Malformed, truncated, or unsupported container data."""


def encode(array: np.ndarray) -> bytes:
    """Serialize an array. Only float32 and int32 are representable."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODE_BY_DTYPE:
        raise NpaError(f"unsupported dtype {arr.dtype}; use float32 or int32")
    if arr.ndim > 255:
        raise NpaError("too many dimensions")
    header = MAGIC + struct.pack("<BB", _CODE_BY_DTYPE[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Read one array from ``buf`` starting at ``offset``.

    Returns the array and the offset one past its payload. Raises
    :class:`NpaError` on any structural problem (bad magic, unknown dtype
    code, or a payload shorter than the shape demands).
    """
    if buf[offset : offset + 4] != MAGIC:
        raise NpaError("bad magic bytes (not an NPA container)")
    if len(buf) < offset + 6:
        raise NpaError("truncated header")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPE_BY_CODE:
        raise NpaError(f"unknown dtype code {code}")
    shape_end = offset + 6 + 4 * ndim
    if len(buf) < shape_end:
        raise NpaError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, offset + 6)
    dtype = _DTYPE_BY_CODE[code]
    count = 1
    for s in shape:
        count *= s
    end = shape_end + count * dtype.itemsize
    if len(buf) < end:
        raise NpaError("payload shorter than shape requires")
    arr = np.frombuffer(buf[shape_end:end], dtype=dtype).reshape(shape).copy()
    return arr, end


def write(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode(data)
    if end != len(data):
        raise NpaError(f"{len(data) - end} trailing bytes after payload")
    return arr


# ---------------------------------------------------------------------------
# bundle: many named arrays plus JSON metadata in one file

BUNDLE_MAGIC = b"NPB1"


def write_bundle(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """One file: magic, uint32 header length, JSON header, NPA blobs.

    The header carries ``meta`` plus a name -> byte offset index into the
    blob area. Serialization is canonical (sorted keys), so identical
    content gives identical bytes.
    """
    import json

    blobs = b""
    offsets = {}
    for name in sorted(arrays):
        offsets[name] = len(blobs)
        blobs += encode(arrays[name])
    header = json.dumps(
        {"meta": meta, "offsets": offsets}, sort_keys=True, separators=(",", ":")
    ).encode()
    Path(path).write_bytes(BUNDLE_MAGIC + struct.pack("<I", len(header)) + header + blobs)


def read_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    data = Path(path).read_bytes()
    if data[:4] != BUNDLE_MAGIC:
        raise NpaError("bad bundle magic")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen].decode())
    blob_start = 8 + hlen
    arrays = {}
    for name, off in header["offsets"].items():
        arrays[name], _ = decode(data, blob_start + off)
    return arrays, header["meta"]
