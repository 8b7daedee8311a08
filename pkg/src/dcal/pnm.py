"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` whitespace-separated header integers, skipping # comments."""
    values, pos = [], 2
    while len(values) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PnmError("malformed PNM header")
        values.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return values, pos + 1


def read_pnm(path) -> np.ndarray:
    """Return an array of shape (height, width, channels) scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported magic {magic!r} (need P5 or P6)")
    (width, height, maxval), offset = _tokens(buf, 3)
    if maxval != 255:
        raise PnmError(f"{path}: only 8-bit maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    raster = np.frombuffer(buf, dtype=np.uint8, count=width * height * channels, offset=offset)
    return raster.reshape(height, width, channels).astype(np.float32) / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(
        np.uint8
    )


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write (H, W) / (H, W, 1) as P5 or (H, W, 3) as P6. Floats are taken in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    height, width, channels = arr.shape
    if channels not in (1, 3):
        raise PnmError(f"cannot write {channels}-channel image")
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())
