"""Binary PPM (P6) images and PGM (P5) label maps, maxval 255 only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError, UnsupportedFormatError

_WHITESPACE = b" \t\n\r\v\f"


def _parse_header(buf):
    """Return (magic, width, height, data_offset)."""
    if len(buf) < 2:
        raise ParseError("file too short for a netpbm magic number", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise ParseError("header ended early", pos)
        c = buf[pos:pos + 1]
        if c in _WHITESPACE:
            pos += 1
        elif c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated comment", pos)
            pos = end + 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(buf[start:pos]))
            if pos < len(buf) and buf[pos:pos + 1] not in _WHITESPACE + b"#":
                raise ParseError("malformed header field", pos)
        else:
            raise ParseError(f"unexpected byte {c!r} in header", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise ParseError("expected a single whitespace byte after maxval", pos)
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise ParseError(f"non-positive size {width}x{height}", pos)
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval} not supported (only 255)")
    return magic, width, height, pos + 1


def decode(buf):
    """Decode P5/P6 bytes into a uint8 array (H x W or H x W x 3)."""
    magic, w, h, off = _parse_header(buf)
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = buf[off:off + need]
    if len(payload) < need:
        raise ParseError(f"expected {need} data bytes, found {len(payload)}", off + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def encode(arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_image(path):
    """P6 file -> float32 array 3 x H x W with values in [0, 1]."""
    raw = decode(Path(path).read_bytes())
    if raw.ndim != 3:
        raise UnsupportedFormatError(f"{path}: expected a P6 colour image")
    return (raw.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_image(path, image):
    """3 x H x W float image in [0, 1] -> P6; values are clamped and rounded."""
    image = np.asarray(image, dtype=np.float32)
    q = np.rint(np.clip(image, 0.0, 1.0) * np.float32(255.0)).astype(np.uint8)
    Path(path).write_bytes(encode(q.transpose(1, 2, 0)))


def read_labels(path):
    """P5 file -> uint8 H x W class ids (255 = ignore)."""
    raw = decode(Path(path).read_bytes())
    if raw.ndim != 2:
        raise UnsupportedFormatError(f"{path}: expected a P5 label map")
    return raw.copy()


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label ids must fit in a byte")
    Path(path).write_bytes(encode(labels.astype(np.uint8)))
