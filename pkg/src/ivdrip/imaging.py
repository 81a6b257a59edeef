"""Netpbm I/O and bilinear resampling shared by the generator and the stream engine."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM (P6, maxval 255)."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValueError(f"PGM needs (H, W) uint8, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def _read_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace before the raster
    n = w * h * channels
    if len(data) - pos < n:
        raise ValueError("truncated raster")
    arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(Path(path).read_bytes(), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(Path(path).read_bytes(), b"P5", 1)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Unit-interval floats -> uint8 with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def resample(img: np.ndarray, out_shape: tuple[int, int], scale: tuple[float, float],
             offset: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Bilinear resample of an (H, W[, C]) image.

    Output pixel (r, c) takes the source value at ``((r + offset[0]) / scale[0],
    (c + offset[1]) / scale[1])``: scale the image by ``scale`` then crop at
    ``offset``. Samples outside the source repeat the edge pixel.
    """
    img = np.asarray(img)
    rows = (np.arange(out_shape[0]) + offset[0]) / scale[0]
    cols = (np.arange(out_shape[1]) + offset[1]) / scale[1]
    if img.ndim == 2:
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")
    return np.stack([resample(img[..., ch], out_shape, scale, offset)
                     for ch in range(img.shape[2])], axis=-1)
