"""Binary container for named tensors.

Layout (all integers little-endian)::

    b"SVQT" | u32 version=1 | u32 count
    per entry: u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64)
               | u32 ndim | ndim x u64 dims | row-major payload
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"SVQT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_tensors(tensors) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            arr = arr.astype(np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        code = CODES[arr.dtype]
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    result = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start) from None
        code, ndim = struct.unpack("<BI", take(5, "dtype and rank"))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code}", pos - 5)
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dimensions"))
        dtype = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize if ndim else dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        result[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return result


def save_tensors(path, tensors):
    """Write atomically (temp file + rename)."""
    data = encode_tensors(tensors)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".svqt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
