"""Flat binary container mapping names to arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"LCMAECK1"
    count      u32       number of entries
    entry * count:
      name_len u16
      name     utf-8 bytes
      dtype    2 ascii bytes: f4 f8 i4 i8 u1 or "bt" (packed bit vector)
      ndim     u8
      shape    u32 * ndim
      nbytes   u64
      payload  nbytes raw bytes, row-major, little-endian

"bt" entries hold a 1-D 0/1 vector packed with ``np.packbits`` (MSB first);
their shape records the unpacked length. Reading returns exactly the arrays
that were written.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LCMAECK1"
_TAGS = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "u1"}
_BY_DTYPE = {np.dtype(v).newbyteorder("<") if v != "u1" else np.dtype(v): k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


class Bits:
    """Marks a 0/1 vector to be stored packed."""

    def __init__(self, bits):
        self.bits = np.asarray(bits).astype(np.uint8).ravel()


def _tag_for(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _BY_DTYPE:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return _BY_DTYPE[dt]


def save(path, arrays: Mapping[str, np.ndarray | Bits]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        raw_name = name.encode("utf-8")
        if isinstance(value, Bits):
            tag, shape = "bt", (value.bits.size,)
            payload = np.packbits(value.bits).tobytes()
        else:
            arr = np.asarray(value)  # ascontiguousarray would promote 0-d to 1-d
            if arr.dtype == bool:
                arr = arr.astype(np.uint8)
            tag, shape = _tag_for(arr), arr.shape
            payload = arr.astype(_TAGS[tag], copy=False).tobytes(order="C")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(tag.encode("ascii") + struct.pack("<B", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag = data[pos:pos + 2].decode("ascii")
        pos += 2
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        (nbytes,) = take("<Q")
        payload = data[pos:pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"truncated payload for {name!r} at byte {pos}")
        pos += nbytes
        if tag == "bt":
            arr = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=shape[0])
        elif tag in _TAGS:
            arr = np.frombuffer(payload, dtype=_TAGS[tag]).reshape(shape)
            arr = arr.astype(arr.dtype.newbyteorder("="))
        else:
            raise CheckpointError(f"unknown dtype tag {tag!r} for {name!r}")
        out[name] = arr.copy()
    return out
