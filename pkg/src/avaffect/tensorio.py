"""Bit-exact binary container for named tensors.

Layout, little-endian throughout:

    magic "S2S1" (4 bytes)
    format version u8 = 1
    entry count u32
    per entry:
        name length u16, then UTF-8 name bytes
        dtype u8 (0 = float32, 1 = float64)
        rank u8
        extents u64[rank]
        payload, row-major
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .exceptions import FormatError, InputError

MAGIC = b"S2S1"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensors(path, tensors: Mapping[str, "np.ndarray | Tensor"]) -> None:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype not in _DTYPE_CODES:
            raise InputError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise InputError(f"tensor name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated tensor container")
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise FormatError(f"bad magic in {path}")
    (version,) = reader.unpack("<B")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (count,) = reader.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, rank = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for entry {name!r}")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = reader.take(n_bytes)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if reader.pos != len(reader.blob):
        raise FormatError("trailing bytes after final entry")
    return out
