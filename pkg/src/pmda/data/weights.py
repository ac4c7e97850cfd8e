"""The PMDA weights file.

Layout (little-endian)::

    b"PMDA" | version u32 | count u32
    count x ( name_len u32 | name utf-8 | rank u32 | extents u32[rank] | float32[prod] )
    crc32 u32 over every preceding byte

A JSON metadata blob rides along as the tensor ``__meta__`` whose float32
values are its UTF-8 bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import FormatError, IntegrityError, UnsupportedVersionError

MAGIC = b"PMDA"
VERSION = 1
META_KEY = "__meta__"


def encode_tensors(tensors, meta=None):
    items = dict(tensors)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        items[META_KEY] = np.frombuffer(blob, dtype=np.uint8).astype(np.float32)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr, dtype="<f4")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<I", len(bname)))
        parts.append(bname)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(buf):
    """Inverse of :func:`encode_tensors`; returns (tensors, meta)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a PMDA weights file (bad magic)")
    if len(buf) < 16:
        raise IntegrityError("weights file truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"weights format version {version} (supported: {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("weights file checksum mismatch (truncated or corrupted)")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 4 * n > len(body):
                raise IntegrityError(f"tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as e:
        raise IntegrityError(f"weights file truncated: {e}") from None
    if pos != len(body):
        raise IntegrityError("trailing bytes after last tensor")
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).astype(np.uint8).tobytes().decode("utf-8"))
    return tensors, meta


def save_tensors(path, tensors, meta=None):
    Path(path).write_bytes(encode_tensors(tensors, meta))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())
