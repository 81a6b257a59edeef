"""DRPV raw video container: a fixed little-endian header then RGB24 frames.

    magic "DRPV" | u32 version=1 | u32 width | u32 height
    u32 fps_num | u32 fps_den | u64 frame_count | frame_count * (height*width*3) bytes
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

MAGIC = b"DRPV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class DrpvHeader:
    width: int
    height: int
    fps_num: int
    fps_den: int
    frame_count: int

    @property
    def fps(self) -> float:
        return self.fps_num / self.fps_den

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * 3


def _pack_header(h: DrpvHeader) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, h.width, h.height, h.fps_num, h.fps_den, h.frame_count)


def read_header(fh: BinaryIO) -> DrpvHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ContainerError(f"bad DRPV magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise ContainerError("truncated DRPV header")
    _, version, w, h, num, den, count = _HEADER.unpack(raw)
    if version != VERSION:
        raise ContainerError(f"unsupported DRPV version {version}")
    if w == 0 or h == 0 or num == 0 or den == 0:
        raise ContainerError("DRPV header has zero geometry or frame rate")
    return DrpvHeader(w, h, num, den, count)


def write_drpv(path, width: int, height: int, fps_num: int, fps_den: int,
               frames: Iterable[np.ndarray]) -> int:
    """Stream ``frames`` ((height, width, 3) uint8) into ``path``; returns the frame count.

    The count is patched into the header after the last frame, so ``frames``
    may be a generator.
    """
    count = 0
    with open(path, "wb") as fh:
        fh.write(_pack_header(DrpvHeader(width, height, fps_num, fps_den, 0)))
        for f in frames:
            if f.shape != (height, width, 3) or f.dtype != np.uint8:
                raise ContainerError(f"frame {count} is {f.dtype} {f.shape}, expected uint8 {(height, width, 3)}")
            fh.write(np.ascontiguousarray(f).tobytes())
            count += 1
        fh.seek(0)
        fh.write(_pack_header(DrpvHeader(width, height, fps_num, fps_den, count)))
    return count


def iter_drpv(path) -> tuple[DrpvHeader, Iterator[np.ndarray]]:
    fh = open(path, "rb")
    try:
        header = read_header(fh)
    except Exception:
        fh.close()
        raise

    def frames():
        with fh:
            for k in range(header.frame_count):
                buf = fh.read(header.frame_bytes)
                if len(buf) != header.frame_bytes:
                    raise ContainerError(f"DRPV truncated at frame {k} of {header.frame_count}")
                yield np.frombuffer(buf, dtype=np.uint8).reshape(header.height, header.width, 3)

    return header, frames()


def read_drpv(path) -> tuple[DrpvHeader, np.ndarray]:
    header, it = iter_drpv(path)
    frames = list(it)
    arr = np.stack(frames) if frames else np.zeros((0, header.height, header.width, 3), np.uint8)
    return header, arr
