"""Frame sources, batch assembly across streams, and routing of network output."""
from __future__ import annotations

import logging
import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .. import imaging
from ..dripcount import StreamMonitor
from ..dropnet import DropNet
from .container import iter_drpv

log = logging.getLogger(__name__)

TRANSPORTS = ("ppm-dir", "drpv", "pipe", "memory")


class RoutingError(RuntimeError):
    pass


def preprocess(raw: np.ndarray, W: int) -> np.ndarray:
    """(H, W', 3) uint8 -> (W, W, 3) float32 in [0, 1]: centre crop, bilinear resize, /255."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ValueError(f"expected a nonempty (H, W, 3) frame, got {raw.shape}")
    h, w, _ = raw.shape
    if h == W and w == W:
        return raw.astype(np.float32) * np.float32(1.0 / 255.0)
    side = min(h, w)
    r0, c0 = (h - side) // 2, (w - side) // 2
    scale = W / side
    # half-pixel-centre alignment, shifted by the crop origin
    off = 0.5 * (1.0 - scale)
    img = imaging.resample(raw.astype(np.float32), (W, W), (scale, scale),
                           (off + r0 * scale, off + c0 * scale))
    return np.clip(img, 0.0, 255.0) * np.float32(1.0 / 255.0)


@dataclass
class RawFrame:
    stream_id: str
    frame_index: int
    t: float
    pixels: np.ndarray


@dataclass
class StreamSource:
    stream_id: str
    transport: str
    path: str | None = None
    fps: float | None = None
    width: int | None = None  # pipe geometry
    height: int | None = None
    frames_in: Iterable[np.ndarray] | None = field(default=None, repr=False)  # memory transport
    pipe: BinaryIO | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.fps is not None and self.fps <= 0:
            raise ValueError("fps must be positive")

    def open(self) -> Iterator[RawFrame]:
        """Validate the source and return its frame iterator (raises on bad setup)."""
        sid = self.stream_id
        if self.transport == "drpv":
            header, it = iter_drpv(self.path)
            fps = self.fps or header.fps
            return (RawFrame(sid, k, k / fps, f) for k, f in enumerate(it))
        if self.transport == "ppm-dir":
            files = sorted(Path(self.path).glob("*.ppm"))
            if not files:
                raise FileNotFoundError(f"no .ppm frames in {self.path}")
            if not self.fps:
                raise ValueError(f"stream {sid}: ppm-dir transport needs fps")
            return (RawFrame(sid, k, k / self.fps, imaging.read_ppm(f)) for k, f in enumerate(files))
        if self.transport == "memory":
            if not self.fps:
                raise ValueError(f"stream {sid}: memory transport needs fps")
            if self.frames_in is None:
                raise ValueError(f"stream {sid}: memory transport needs in-process frames")
            return (RawFrame(sid, k, k / self.fps, f) for k, f in enumerate(self.frames_in))
        if not (self.width and self.height):
            raise ValueError(f"stream {sid}: pipe transport needs width and height")
        fh = self.pipe
        if fh is None:
            fh = sys.stdin.buffer if self.path in (None, "-") else open(self.path, "rb")
        return self._read_pipe(fh)

    def _read_pipe(self, fh: BinaryIO) -> Iterator[RawFrame]:
        size = self.width * self.height * 3
        t0 = None
        k = 0
        while True:
            buf = fh.read(size)
            if not buf:
                return
            if len(buf) != size:
                raise ValueError(f"stream {self.stream_id}: partial frame ({len(buf)} of {size} bytes)")
            now = time.monotonic()
            t0 = now if t0 is None else t0
            yield RawFrame(self.stream_id, k, now - t0,
                           np.frombuffer(buf, np.uint8).reshape(self.height, self.width, 3))
            k += 1


_END = object()


class LiveSource:
    """A producer thread draining a :class:`StreamSource` into a bounded queue."""

    def __init__(self, source: StreamSource, maxsize: int = 64):
        self.source = source
        self.stream_id = source.stream_id
        self._it = source.open()
        self._q: queue.Queue = queue.Queue(maxsize)
        self.exhausted = False
        self.error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, name=f"src-{self.stream_id}", daemon=True)
        self._thread.start()

    def _run(self):
        try:
            for frame in self._it:
                self._q.put(frame)
        except Exception as e:  # decode failure: drop this stream only
            self.error = e
        finally:
            self._q.put(_END)

    def poll(self, timeout: float) -> RawFrame | None:
        if self.exhausted:
            return None
        try:
            item = self._q.get(timeout=max(timeout, 0.0)) if timeout > 0 else self._q.get_nowait()
        except queue.Empty:
            return None
        if item is _END:
            self.exhausted = True
            if self.error is not None:
                log.warning("stream %s dropped: %s", self.stream_id, self.error)
            return None
        return item


@dataclass
class StreamBatch:
    frames: np.ndarray  # (batch_n, W, W, 3) float32
    provenance: list[tuple[str, int, float]]  # (stream_id, frame_index, t) per slot

    def __len__(self):
        return len(self.provenance)

    def __post_init__(self):
        if len(self.provenance) != len(self.frames):
            raise ValueError("provenance length must equal batch size")
        last: dict[str, int] = {}
        for sid, k, _ in self.provenance:
            if sid in last and k <= last[sid]:
                raise ValueError(f"stream {sid}: frame indices not increasing in batch")
            last[sid] = k

    @classmethod
    def empty(cls, W: int) -> "StreamBatch":
        return cls(np.zeros((0, W, W, 3), np.float32), [])


def collect_batch(sources: Sequence[LiveSource], n_f: int, timeout: float, W: int,
                  stats: dict | None = None) -> StreamBatch:
    """Up to ``n_f`` consecutive frames from each live source, sharing one deadline.

    A source with nothing ready before the deadline is left out of this batch;
    if every source is stalled or finished the batch is empty.
    """
    if n_f < 1:
        raise ValueError("n_f must be >= 1")
    deadline = time.monotonic() + timeout
    frames, prov = [], []
    pre = 0.0
    for src in sources:
        for _ in range(n_f):
            f = src.poll(deadline - time.monotonic())
            if f is None:
                break
            t0 = time.perf_counter()
            frames.append(preprocess(f.pixels, W))
            pre += time.perf_counter() - t0
            prov.append((f.stream_id, f.frame_index, f.t))
    if stats is not None:
        stats["preprocess"] = stats.get("preprocess", 0.0) + pre
    if not frames:
        return StreamBatch.empty(W)
    return StreamBatch(np.stack(frames), prov)


def infer_and_route(net: DropNet, batch: StreamBatch, monitors: dict[str, StreamMonitor],
                    stats: dict | None = None) -> list[dict]:
    """Run the batch through ``net`` and feed each grid to its stream's monitor in frame order."""
    if len(batch) == 0:
        return []
    unknown = {sid for sid, _, _ in batch.provenance} - set(monitors)
    if unknown:
        raise RoutingError(f"batch references unknown streams {sorted(unknown)}")
    t0 = time.perf_counter()
    grids = net.eval().forward(batch.frames)
    t1 = time.perf_counter()
    records = []
    for (sid, _, t), grid in zip(batch.provenance, grids):
        records.extend(monitors[sid].process(grid, t))
    if stats is not None:
        stats["infer"] = stats.get("infer", 0.0) + (t1 - t0)
        stats["decode"] = stats.get("decode", 0.0) + (time.perf_counter() - t1)
    return records
