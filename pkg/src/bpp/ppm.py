"""Bit-exact binary PPM/PGM image files and atomic file writes.

Pixels map to [0, 1] floats by /255 on read; writes quantize with
round-half-away-from-zero so read -> write -> read is the identity.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

__all__ = [
    "atomic_write_bytes",
    "pgm_write",
    "ppm_read",
    "ppm_write",
]


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _HeaderScanner:
    """Whitespace/comment-aware token reader that tracks its byte offset."""

    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def fail(self, msg):
        raise ValueError(f"{self.path}: {msg} at byte offset {self.pos}")

    def token(self):
        b = self.blob
        while self.pos < len(b):
            ch = b[self.pos:self.pos + 1]
            if ch == b"#":
                while self.pos < len(b) and b[self.pos:self.pos + 1] != b"\n":
                    self.pos += 1
            elif ch.isspace():
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < len(b) and not b[self.pos:self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            self.fail("unexpected end of header")
        return b[start:self.pos]

    def int_token(self, what):
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            self.fail(f"expected integer {what}, got {tok!r}")


def _read_raster(path, magic_want, channels):
    with open(path, "rb") as f:
        blob = f.read()
    sc = _HeaderScanner(blob, path)
    magic = sc.token()
    if magic != magic_want:
        sc.pos = 0
        sc.fail(f"expected magic {magic_want.decode()!r}, got {magic.decode(errors='replace')!r}")
    w = sc.int_token("width")
    h = sc.int_token("height")
    maxval = sc.int_token("maxval")
    if maxval != 255:
        sc.fail(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        sc.fail(f"bad dimensions {w}x{h}")
    # exactly one whitespace byte separates header and raster
    if sc.pos >= len(blob) or not blob[sc.pos:sc.pos + 1].isspace():
        sc.fail("missing whitespace after maxval")
    sc.pos += 1
    need = w * h * channels
    raster = blob[sc.pos:sc.pos + need]
    if len(raster) != need:
        raise ValueError(
            f"{path}: truncated raster, need {need} bytes from offset {sc.pos}, "
            f"have {len(blob) - sc.pos}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return arr


def ppm_read(path):
    """Read a binary 'P6' 8-bit PPM into a (1, 3, h, w) float32 array in [0, 1]."""
    arr = _read_raster(path, b"P6", 3)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def _quantize(img):
    img = np.asarray(img)
    if img.ndim != 4 or img.shape[0] != 1:
        raise ValueError(f"image write expects shape (1,c,h,w), got {img.shape}")
    v = np.clip(img[0].astype(np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)  # round half away from zero


def ppm_write(path, img):
    """Write a (1, 3, h, w) array in [0, 1] as binary 8-bit PPM."""
    q = _quantize(img)
    if q.shape[0] != 3:
        raise ValueError(f"ppm_write expects 3 channels, got {q.shape[0]}")
    c, h, w = q.shape
    header = f"P6\n{w} {h}\n255\n".encode()
    atomic_write_bytes(path, header + q.transpose(1, 2, 0).tobytes())


def pgm_write(path, img):
    """Write a (1, 1, h, w) array in [0, 1] as binary 8-bit PGM."""
    q = _quantize(img)
    if q.shape[0] != 1:
        raise ValueError(f"pgm_write expects 1 channel, got {q.shape[0]}")
    c, h, w = q.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    atomic_write_bytes(path, header + q[0].tobytes())
