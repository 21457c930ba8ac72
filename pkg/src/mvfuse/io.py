"""Binary containers shared by the package.

Every file ends with a 64-bit FNV-1a checksum of all preceding bytes.
Integers are little-endian.  ``FBT1`` holds a single tensor::

    b"FBT1" | u8 dtype | u8 rank | rank x u64 dims | payload | u64 fnv1a
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF

TENSOR_MAGIC = b"FBT1"
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised when a container is malformed, truncated or fails its checksum."""


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def seal(body: bytes) -> bytes:
    """Append the FNV-1a trailer."""
    return body + struct.pack("<Q", fnv1a64(body))


def unseal(blob: bytes, magic: bytes) -> memoryview:
    """Check magic and trailer; return the body without the trailer."""
    if len(blob) < len(magic) + 8:
        raise FormatError("truncated file")
    if blob[: len(magic)] != magic:
        raise FormatError(f"bad magic {bytes(blob[:len(magic)])!r}, expected {magic!r}")
    body = blob[:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != stored:
        raise FormatError("checksum mismatch")
    return memoryview(body)


class Reader:
    """Sequential little-endian reader over a byte buffer."""

    def __init__(self, buf, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def pack_array(arr: np.ndarray) -> bytes:
    """dtype code, rank, dims and payload of one array."""
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=dt, order="C")  # ascontiguousarray would promote 0-d to 1-d
    head = struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
    head += b"".join(struct.pack("<Q", n) for n in arr.shape)
    return head + arr.tobytes()


def unpack_array(reader: Reader) -> np.ndarray:
    code, rank = reader.unpack("<BB")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = tuple(reader.unpack("<Q")[0] for _ in range(rank))
    dt = CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = reader.take(count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).reshape(dims).copy()


def encode_tensor(arr: np.ndarray) -> bytes:
    return seal(TENSOR_MAGIC + pack_array(arr))


def decode_tensor(blob: bytes) -> np.ndarray:
    reader = Reader(unseal(blob, TENSOR_MAGIC), len(TENSOR_MAGIC))
    arr = unpack_array(reader)
    if not reader.at_end():
        raise FormatError("trailing bytes after tensor payload")
    return arr


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
