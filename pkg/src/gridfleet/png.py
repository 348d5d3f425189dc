"""Minimal deterministic PNG encoder.

Encodes an RGB uint8 array as an 8-bit truecolor PNG with no filtering
and a pinned zlib level, so a given pixel array always produces the
same bytes under a given zlib build.  Decoding is deliberately out of
scope; consumers that need pixels back use any stock image library.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_MAGIC = b"\x89PNG\r\n\x1a\n"
_COMPRESS_LEVEL = 1  # pinned: speed over size, stable output


def _chunk(tag: bytes, body: bytes) -> bytes:
    return (
        struct.pack(">I", len(body))
        + tag
        + body
        + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
    )


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an ``(H, W, 3)`` uint8 array as PNG bytes."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 array, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    # filter byte 0 prepended to each scanline
    rows = np.empty((h, w * 3 + 1), dtype=np.uint8)
    rows[:, 0] = 0
    rows[:, 1:] = pixels.reshape(h, w * 3)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    idat = zlib.compress(rows.tobytes(), _COMPRESS_LEVEL)
    return _MAGIC + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")
