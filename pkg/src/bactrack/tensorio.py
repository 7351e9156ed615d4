"""Binary serialization for dense tensors.

Layout, all little-endian:

    magic   4 bytes  b"BACT"
    version 1 byte   currently 1
    rank    1 byte   1..3
    extents rank x uint32
    prec    1 byte   32 or 64 (IEEE-754 payload width)
    payload rank-product scalars, row-major

Round-trips are byte-identical: load(save(x)) re-serializes to the same
bytes for any valid tensor.
"""

import struct
from pathlib import Path

import numpy as np

from .numerics import check_tensor

MAGIC = b"BACT"
VERSION = 1

_PREC_TO_DTYPE = {32: np.dtype("<f4"), 64: np.dtype("<f8")}
_DTYPE_TO_PREC = {np.dtype(np.float32): 32, np.dtype(np.float64): 64}


class FormatError(ValueError):
    """Raised when a serialized payload violates the tensor format."""


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = check_tensor(x)
    prec = _DTYPE_TO_PREC[x.dtype]
    header = MAGIC + struct.pack("<BB", VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    header += struct.pack("<B", prec)
    return header + np.ascontiguousarray(x, dtype=_PREC_TO_DTYPE[prec]).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("bad magic; not a tensor payload")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if not 1 <= rank <= 3:
        raise FormatError(f"rank must be 1-3, got {rank}")
    off = 6
    if len(buf) < off + 4 * rank + 1:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (prec,) = struct.unpack_from("<B", buf, off)
    off += 1
    if prec not in _PREC_TO_DTYPE:
        raise FormatError(f"precision byte must be 32 or 64, got {prec}")
    if any(e == 0 for e in shape):
        raise FormatError(f"zero extent in shape {shape}")
    dtype = _PREC_TO_DTYPE[prec]
    count = int(np.prod(shape))
    expected = off + count * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"payload length {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    out = data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    if not np.all(np.isfinite(out)):
        raise FormatError("payload contains non-finite values")
    return out


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
