"""Binary named-tensor container.

Layout (little-endian)::

    b"STNT" | version u16 | count u32
    count x ( name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 * ndim | payload )
    crc32 u32 over every preceding byte

dtype codes: 0 = float32, 1 = float64. Payloads are row-major.
"""
import math
import os
import struct
import tempfile
import zlib

import numpy as np

from ..errors import ChecksumMismatch, FormatError

MAGIC = b"STNT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_tensors(tensors):
    """Serialize an ordered mapping ``name -> array`` to bytes."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf, end):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n, what):
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated data while reading {what}", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf):
    """Parse bytes produced by :func:`encode_tensors`.

    Raises
    ------
    FormatError
        On structural damage, with the byte offset where parsing failed.
    ChecksumMismatch
        If the structure parses but the trailing CRC32 disagrees.
    """
    buf = bytes(buf)
    if len(buf) < len(MAGIC) + 6 + 4:
        raise FormatError(f"file too short ({len(buf)} bytes)", offset=len(buf))
    r = _Reader(buf, len(buf) - 4)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes", offset=0)
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    tensors = {}
    for i in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {i}: name is not valid UTF-8", offset=start + 2) from exc
        code, ndim = r.unpack("<BB", f"dtype of tensor {name!r}")
        if code not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}", offset=r.pos - 2)
        dims_at = r.pos
        dims = r.unpack(f"<{ndim}I", f"dims of tensor {name!r}")
        dtype = DTYPES[code]
        nbytes = dtype.itemsize * math.prod(dims)
        payload = r.take(nbytes, f"payload of tensor {name!r}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", offset=start)
        try:
            flat = np.frombuffer(payload, dtype=dtype).reshape(dims)
        except ValueError as exc:
            # e.g. an empty tensor whose other dims exceed the addressable size
            raise FormatError(f"tensor {name!r}: unusable shape {dims}", offset=dims_at) from exc
        tensors[name] = flat.astype(dtype.newbyteorder("="))
    if r.pos != r.end:
        raise FormatError(f"{r.end - r.pos} unexpected trailing bytes", offset=r.pos)
    (stored,) = struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumMismatch(f"CRC32 mismatch: stored {stored:08x}, computed {actual:08x}", offset=len(buf) - 4)
    return tensors


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensors(path, tensors):
    atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return decode_tensors(data)
    except FormatError as exc:
        wrapped = type(exc)(f"{path}: {exc}")
        wrapped.offset = exc.offset
        raise wrapped from None
