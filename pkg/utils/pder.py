# polarseg/utils/pder.py
"""
PDER derived-tensor files: b"PDER", u16 version, u8 dtype (0=f32, 1=f64), u8 ndim,
ndim x u32 dims, then the little-endian row-major payload.
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np

from core.errors import FormatError

MAGIC = b"PDER"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.float32: 0, np.float64: 1}
U32_MAX = 2 ** 32 - 1


def encode_derived(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = DTYPE_CODES.get(array.dtype.type)
    if code is None:
        raise FormatError(f"PDER stores float32/float64 only, got {array.dtype}")
    if array.ndim == 0 or array.ndim > 255 or 0 in array.shape:
        raise FormatError("PDER needs 1-255 non-empty dimensions", details={"shape": list(array.shape)})
    if any(d > U32_MAX for d in array.shape):
        raise FormatError("PDER dimension exceeds u32", details={"shape": list(array.shape)})
    if not np.all(np.isfinite(array)):
        raise FormatError("PDER payload must be finite")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def decode_derived(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("Not a PDER file (bad magic)")
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise FormatError(f"Unsupported PDER version {version}")
    if code not in DTYPES:
        raise FormatError(f"Unknown PDER dtype code {code}")
    if ndim == 0:
        raise FormatError("PDER file declares zero dimensions")
    offset = 8 + 4 * ndim
    if len(blob) < offset:
        raise FormatError("Truncated PDER header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    if 0 in dims:
        raise FormatError("PDER file declares an empty dimension", details={"dims": list(dims)})
    dtype = DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    expected = count * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError("PDER payload size does not match its dimensions",
                          details={"expected": expected, "actual": len(blob) - offset, "dims": list(dims)})
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def save_derived(array: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_derived(array))


def load_derived(path: Union[str, Path]) -> np.ndarray:
    return decode_derived(Path(path).read_bytes())
