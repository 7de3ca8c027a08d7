"""Portable binary array format used for cohort volumes, masks and exported predictions.

Layout: magic ``KMTR``, u8 version, u8 dtype code (0=f32, 1=f64, 2=u8, 3=i32),
u8 rank, ``rank`` little-endian u32 dims, then the row-major little-endian
payload. Complex arrays are stored with a trailing dimension of 2 (real, imag).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"KMTR"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i4"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ArrayFormatError(ValueError):
    """Raised for malformed or unsupported array files."""


def _as_storable(a: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(a):
        parts = np.stack([a.real, a.imag], axis=-1)
        return parts.astype("<f8" if a.dtype == np.complex128 else "<f4")
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    if np.dtype(dt) not in _DTYPE_CODES:
        for cand in ("<f8", "<f4", "<i4", "u1"):
            if np.can_cast(a.dtype, cand, casting="same_kind"):
                return a.astype(cand)
        raise ArrayFormatError(f"unsupported dtype {a.dtype}")
    return np.ascontiguousarray(a.astype(dt, copy=False))


def save_array(path: str | Path, a: np.ndarray) -> None:
    """Write ``a`` to ``path``; complex input gains a trailing (real, imag) dim."""
    a = _as_storable(np.asarray(a))
    if a.ndim < 1 or a.ndim > 255:
        raise ArrayFormatError(f"rank {a.ndim} out of range")
    header = MAGIC + struct.pack("<BBB", VERSION, _DTYPE_CODES[np.dtype(a.dtype)], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a).tobytes())


def load_array(path: str | Path) -> np.ndarray:
    """Read an array written by :func:`save_array` (real view; see :func:`as_complex`)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ArrayFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise ArrayFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise ArrayFormatError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", raw[7 : 7 + 4 * rank])
    dtype = _CODE_DTYPES[code]
    payload = raw[7 + 4 * rank :]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise ArrayFormatError(f"{path}: payload size {len(payload)} != expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def as_complex(a: np.ndarray) -> np.ndarray:
    """Merge a trailing (real, imag) dimension back into a complex array."""
    if a.shape[-1] != 2:
        raise ArrayFormatError("trailing dimension must be 2 (real, imag)")
    return a[..., 0] + 1j * a[..., 1]
