"""Canonical length-prefixed binary encoding and hashing.

Every value hashed or signed anywhere in the ledger goes through ``encode``.
Only exact types are accepted: integers, strings, bytes, booleans, None,
sequences, string-keyed mappings and int64 arrays. Floats are refused so that
nothing rounding-dependent can reach a hash.

Layout: one tag byte, then a 4-byte big-endian length, then the body.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Mapping, Sequence

import numpy as np


class CodecError(ValueError):
    pass


def _frame(tag: bytes, body: bytes) -> bytes:
    return tag + struct.pack(">I", len(body)) + body


def _int_bytes(v: int) -> bytes:
    n = max(1, (v.bit_length() + 8) // 8)
    return v.to_bytes(n, "big", signed=True)


def encode(value) -> bytes:
    if value is None:
        return _frame(b"N", b"")
    if isinstance(value, (bool, np.bool_)):
        return _frame(b"B", b"\x01" if value else b"\x00")
    if isinstance(value, (int, np.integer)):
        return _frame(b"I", _int_bytes(int(value)))
    if isinstance(value, str):
        return _frame(b"S", value.encode("utf-8"))
    if isinstance(value, (bytes, bytearray)):
        return _frame(b"Y", bytes(value))
    if isinstance(value, np.ndarray):
        if value.dtype != np.int64:
            raise CodecError(f"only int64 arrays are canonical, got {value.dtype}")
        head = struct.pack(">I", value.ndim) + b"".join(struct.pack(">Q", d) for d in value.shape)
        return _frame(b"A", head + value.astype(">i8").tobytes())
    if isinstance(value, Mapping):
        keys = list(value)
        if not all(isinstance(k, str) for k in keys):
            raise CodecError("mapping keys must be strings")
        body = b"".join(encode(k) + encode(value[k]) for k in sorted(keys))
        return _frame(b"D", body)
    if isinstance(value, Sequence):
        return _frame(b"L", b"".join(encode(v) for v in value))
    raise CodecError(f"no canonical encoding for {type(value).__name__}")


def decode(data: bytes):
    """Inverse of ``encode``; sequences come back as lists."""
    value, end = _decode_at(data, 0)
    if end != len(data):
        raise CodecError(f"{len(data) - end} trailing bytes")
    return value


def _decode_at(data: bytes, pos: int):
    if pos + 5 > len(data):
        raise CodecError("truncated frame header")
    tag = data[pos:pos + 1]
    (n,) = struct.unpack(">I", data[pos + 1:pos + 5])
    start, end = pos + 5, pos + 5 + n
    if end > len(data):
        raise CodecError("truncated frame body")
    body = data[start:end]
    if tag == b"N":
        return None, end
    if tag == b"B":
        return body == b"\x01", end
    if tag == b"I":
        return int.from_bytes(body, "big", signed=True), end
    if tag == b"S":
        return body.decode("utf-8"), end
    if tag == b"Y":
        return bytes(body), end
    if tag == b"A":
        (ndim,) = struct.unpack(">I", body[:4])
        shape = struct.unpack(">" + "Q" * ndim, body[4:4 + 8 * ndim])
        arr = np.frombuffer(body[4 + 8 * ndim:], dtype=">i8").astype(np.int64)
        return arr.reshape(shape), end
    if tag in (b"L", b"D"):
        items, p = [], start
        while p < end:
            v, p = _decode_at(data, p)
            items.append(v)
        if tag == b"L":
            return items, end
        return dict(zip(items[::2], items[1::2])), end
    raise CodecError(f"unknown tag {tag!r}")


def digest(value) -> str:
    """SHA-256 of the canonical bytes, as lowercase hex."""
    return hashlib.sha256(encode(value)).hexdigest()
