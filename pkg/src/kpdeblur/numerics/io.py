"""Portable tensor files and named-tensor checkpoint archives.

Tensor file: ``b"FDT1"``, u32 rank, u32 dims, u8 precision code (4 or 8), raw
little-endian scalars. Archive: u32 count, then per entry a u32-length-prefixed
UTF-8 name followed by one tensor file.
"""

import io
import struct

import numpy as np

from kpdeblur.errors import ParseError

MAGIC = b"FDT1"
_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def tensor_to_bytes(arr):
    arr = np.asarray(getattr(arr, "data", arr))
    code = 8 if arr.dtype == np.float64 else 4
    body = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<B", code) + body


def read_tensor(stream):
    start = stream.tell() if stream.seekable() else 0
    magic = stream.read(4)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", start)
    raw = stream.read(4)
    if len(raw) < 4:
        raise ParseError("truncated rank", start + 4)
    (rank,) = struct.unpack("<I", raw)
    raw = stream.read(4 * rank)
    if len(raw) < 4 * rank:
        raise ParseError("truncated dims", start + 8)
    dims = struct.unpack(f"<{rank}I", raw)
    raw = stream.read(1)
    if len(raw) < 1 or raw[0] not in _CODES:
        raise ParseError(f"bad precision code {raw!r}", start + 8 + 4 * rank)
    dt = _CODES[raw[0]]
    n = int(np.prod(dims, dtype=np.int64))
    body = stream.read(n * dt.itemsize)
    if len(body) < n * dt.itemsize:
        raise ParseError("truncated tensor data", start + 9 + 4 * rank + len(body))
    return np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)


def archive_to_bytes(named):
    """``named`` is an ordered mapping name -> array/Tensor."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(tensor_to_bytes(arr))
    return buf.getvalue()


def read_archive(stream):
    raw = stream.read(4)
    if len(raw) < 4:
        raise ParseError("truncated archive header", 0)
    (count,) = struct.unpack("<I", raw)
    out = {}
    for _ in range(count):
        pos = stream.tell()
        raw = stream.read(4)
        if len(raw) < 4:
            raise ParseError("truncated entry name length", pos)
        (ln,) = struct.unpack("<I", raw)
        name_raw = stream.read(ln)
        if len(name_raw) < ln:
            raise ParseError("truncated entry name", pos + 4)
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("entry name is not UTF-8", pos + 4) from exc
        out[name] = read_tensor(stream)
    return out


def save_archive(path, named):
    with open(path, "wb") as fh:
        fh.write(archive_to_bytes(named))


def load_archive(path):
    with open(path, "rb") as fh:
        return read_archive(fh)
