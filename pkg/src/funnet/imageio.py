"""Minimal netpbm image I/O (PPM/PGM), with optional PNG through Pillow."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from funnet.errors import ConfigError, DimensionError

try:  # optional PNG support
    from PIL import Image as _PILImage
except ImportError:  # pragma: no cover - depends on environment
    _PILImage = None

PNG_AVAILABLE = _PILImage is not None


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("truncated netpbm header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode a binary P5/P6 image into a uint8 array (H, W) or (H, W, 3)."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    width, height, maxv = int(w), int(h), int(maxval)
    if maxv != 255:
        raise ValueError(f"only 8-bit netpbm is supported (maxval {maxv})")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    raw = buf[pos : pos + size]
    if len(raw) != size:
        raise ValueError("truncated netpbm pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM needs an (H, W, 3) array, got {img.shape}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise DimensionError(f"PGM needs an (H, W) array, got {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read an RGB image as uint8 (H, W, 3).

    PPM is always supported; PNG only when Pillow is importable.
    Grayscale PGM input is expanded to three equal channels.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not PNG_AVAILABLE:
            raise ConfigError("PNG input requires the optional 'png' extra (Pillow)")
        with _PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    arr = decode_pnm(path.read_bytes())
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))
