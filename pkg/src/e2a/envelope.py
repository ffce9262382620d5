"""Portable binary container used for datasets and checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic, e.g. b"E2AGRAPH"
    u32       format version
    u32       number of sections
    repeated: u16 name length, name (utf-8), u64 payload length, payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1


def write_envelope(path, magic: bytes, sections: dict[str, bytes]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for name, payload in sections.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def read_envelope(path, magic: bytes) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != magic:
        raise FormatError(f"{path}: not an {magic.decode(errors='replace')} file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version} (this build reads version {VERSION})")
    pos = 16
    sections: dict[str, bytes] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode()
            pos += n
            (size,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + size > len(data):
                raise FormatError(f"{path}: truncated section {name!r}")
            sections[name] = data[pos : pos + size]
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt header") from exc
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last section")
    return sections


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def unpack_json(raw: bytes):
    return json.loads(raw.decode())


def pack_array(arr: np.ndarray) -> bytes:
    """dtype tag, ndim, shape, then raw little-endian data."""
    arr = np.ascontiguousarray(arr)
    tag = {"f": b"f", "i": b"i"}[arr.dtype.kind]
    arr = arr.astype("<f8" if tag == b"f" else "<i8")
    head = tag + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def unpack_array(raw: bytes) -> np.ndarray:
    try:
        tag = raw[:1]
        (ndim,) = struct.unpack_from("<I", raw, 1)
        shape = struct.unpack_from(f"<{ndim}Q", raw, 5)
        body = raw[5 + 8 * ndim :]
        dtype = {b"f": "<f8", b"i": "<i8"}[tag]
        arr = np.frombuffer(body, dtype=dtype)
        return arr.reshape(shape).astype(np.float64 if tag == b"f" else np.int64)
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError("corrupt array section") from exc
