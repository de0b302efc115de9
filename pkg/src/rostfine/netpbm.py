"""Binary netpbm readers/writers: P6 (PPM color) and P5 (PGM grayscale).

Only the 8-bit maxval=255 flavor is supported; that is what the raw video
ingest and heatmap export need.  Writers produce deterministic bytes.
"""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    """Malformed netpbm file."""


def _read_token(fh) -> bytes:
    """Next whitespace-delimited token, skipping '#' comment lines."""
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            if token:
                return token
            raise NetpbmError("unexpected end of file in header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def _read_header(fh, expected_magic: bytes):
    magic = fh.read(2)
    if magic != expected_magic:
        raise NetpbmError(f"bad magic {magic!r}, expected {expected_magic!r}")
    width = int(_read_token(fh))
    height = int(_read_token(fh))
    maxval = int(_read_token(fh))
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    return width, height


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P6")
        payload = fh.read(width * height * 3)
        if len(payload) != width * height * 3:
            raise NetpbmError(f"truncated pixel data in {path}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (image.shape[1], image.shape[0]))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P5")
        payload = fh.read(width * height)
        if len(payload) != width * height:
            raise NetpbmError(f"truncated pixel data in {path}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W) uint8, got {image.shape} {image.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (image.shape[1], image.shape[0]))
        fh.write(image.tobytes())
