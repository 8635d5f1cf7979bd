"""Binary PPM (P6, 8-bit) and PGM (P5, 16-bit big-endian) readers and writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write a [3, H, W] image in [0, 1] as P6 with maxval 255."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {rgb.shape}")
    _, h, w = rgb.shape
    q = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    body = np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def write_pgm16(path: str | Path, values: np.ndarray) -> None:
    """Write an [H, W] array of integers in [0, 65535] as 16-bit P5."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"expected [H, W] array, got {values.shape}")
    if values.min() < 0 or values.max() > 65535:
        raise ValueError("16-bit PGM values must lie in [0, 65535]")
    h, w = values.shape
    body = values.astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + body)


def _read_header(raw: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    w, h, maxval = (int(t) for t in tokens)
    return w, h, maxval, pos


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 image as float [3, H, W] in [0, 1]."""
    raw = Path(path).read_bytes()
    w, h, maxval, pos = _read_header(raw, b"P6")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(raw, dtype=dtype, count=h * w * 3, offset=pos).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def read_pgm16(path: str | Path) -> np.ndarray:
    """Read a P5 image as an integer [H, W] array."""
    raw = Path(path).read_bytes()
    w, h, maxval, pos = _read_header(raw, b"P5")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(raw, dtype=dtype, count=h * w, offset=pos).reshape(h, w).astype(np.int64)
