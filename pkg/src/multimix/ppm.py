"""Binary PGM/PPM (P5/P6, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, img: np.ndarray):
    """Write uint8 (H, W) / (H, W, 1) as P5 or (H, W, 3) as P6. No comments in the header."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError("raster must be uint8")
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read P5/P6 with maxval 255 into uint8 (H, W, C)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return raster.reshape(h, w, c).copy()
