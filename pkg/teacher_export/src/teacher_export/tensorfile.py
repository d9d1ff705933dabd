"""Writer/reader for the trainer's binary tensor container.

Byte layout (all little-endian): magic ``STDT``, u16 version (1), u8 dtype
code (0 = float32), u8 ndim, ndim x u32 dims, then the row-major float32
payload. Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"STDT"
VERSION = 1
DTYPE_F32 = 0


class TensorFileError(RuntimeError):
    pass


def write_tensor(path, array) -> None:
    data = np.asarray(array, dtype="<f4")
    if data.ndim and not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)
    if any(d > 2**32 - 1 for d in data.shape):
        raise TensorFileError(f"dimension exceeds u32 range: {data.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HBB", VERSION, DTYPE_F32, data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor file")
    version, dtype_code, ndim = struct.unpack("<HBB", raw[4:8])
    if version != VERSION or dtype_code != DTYPE_F32:
        raise TensorFileError(f"{path}: unsupported version/dtype "
                              f"({version}, {dtype_code})")
    need = 8 + 4 * ndim
    if len(raw) < need:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", raw[8:need]) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    if len(raw) != need + 4 * count:
        raise TensorFileError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<f4", offset=need).reshape(dims).copy()
