"""Reader/writer for the IDX binary format used by the MNIST distribution.

Layout: two zero bytes, a one-byte type code, a one-byte dimension count,
then one big-endian uint32 per dimension, then the payload in row-major
order.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

# type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODE_BY_DTYPE = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxTypeError(IdxError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX byte string into an array carrying the encoded shape."""
    if len(data) < 4:
        raise IdxTruncatedError(f"header needs 4 bytes, got {len(data)}")
    if data[0] != 0 or data[1] != 0:
        raise IdxMagicError(f"magic must start with 00 00, got {data[0]:02x} {data[1]:02x}")
    code, ndim = data[2], data[3]
    if code not in IDX_TYPES:
        raise IdxTypeError(f"unsupported type code 0x{code:02x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxTruncatedError(f"header declares {ndim} dims but input ends at byte {len(data)}")
    shape = struct.unpack(f">{ndim}I", data[4:header_len])
    dtype = IDX_TYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    expected = count * dtype.itemsize
    payload = data[header_len:]
    if len(payload) < expected:
        raise IdxTruncatedError(f"payload has {len(payload)} bytes, shape {shape} needs {expected}")
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    return arr.astype(dtype.newbyteorder("=")).reshape(shape)


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    try:
        code = _CODE_BY_DTYPE[array.dtype.newbyteorder("=")]
    except KeyError:
        raise IdxTypeError(f"dtype {array.dtype} has no IDX type code") from None
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(IDX_TYPES[code]).tobytes()


def read_idx(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(serialize_idx(array))
