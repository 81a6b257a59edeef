"""Synthetic drip-chamber scenes with exact ground truth.

Coordinates follow the label convention: ``x`` runs along the first image
axis (rows, downward) and ``y`` along the second (columns), so the label cell
``(floor(x*S/W), floor(y*S/W))`` indexes the network's output grid directly.
"""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import imaging

BACKGROUND_STYLES = ("gradient", "stripes", "blotches", "checker")


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    size: int = 128
    background: int = 0
    luminance: float = 0.3
    gain: float = 1.0
    dripper: tuple[float, float] = (48.0, 64.0)  # nozzle tip (row, col)
    drop_radius: float = 8.0
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.background not in range(len(BACKGROUND_STYLES)):
            raise ParameterError(f"unknown background style {self.background}")
        if not 0 <= self.luminance <= 1:
            raise ParameterError("luminance must be in [0, 1]")
        if not 0.2 <= self.gain <= 1.5:
            raise ParameterError("illumination gain must be in [0.2, 1.5]")
        if not 0 <= self.noise_sigma <= 0.1:
            raise ParameterError("noise sigma must be in [0, 0.1]")
        if self.drop_radius <= 0:
            raise ParameterError("drop radius must be positive")
        r, (px, py) = self.drop_radius, self.dripper
        if not (r <= px < self.size - r and r <= py < self.size - r):
            raise ParameterError(f"dripper {self.dripper} not inside the frame with a {r} px margin")


@dataclass
class LabeledSample:
    frame: np.ndarray  # (W, W, 3) float32 in [0, 1]
    x: float
    y: float
    s: int

    def __post_init__(self):
        W = self.frame.shape[0]
        if not (0 <= self.x < W and 0 <= self.y < W):
            raise ParameterError(f"drop position ({self.x}, {self.y}) outside a {W} px frame")
        if self.s not in (0, 1):
            raise ParameterError(f"state must be 0 or 1, got {self.s}")


# --------------------------------------------------------------------------
# drop geometry
# --------------------------------------------------------------------------

def drop_shape(s: int, phase: float, radius: float) -> tuple[float, float, float]:
    """(vertical semi-axis, horizontal semi-axis, nozzle-tip distance above centre).

    State 0 is a flattened bulge just under the nozzle; state 1 a full
    elongated drop whose top touches the nozzle. ``phase`` grows either one.
    """
    if s == 0:
        rb = radius * (0.35 + 0.20 * phase)
        a, b = 0.8 * rb, rb
        return a, b, 0.2 * a
    rs = radius * (0.85 + 0.15 * phase)
    a, b = 1.15 * rs, rs
    return a, b, a


def drop_center(scene: SceneSpec, s: int, phase: float) -> tuple[float, float]:
    _, _, tip = drop_shape(s, phase, scene.drop_radius)
    return scene.dripper[0] + tip, scene.dripper[1]


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

Window = tuple[int, int, int, int]  # (row0, col0, height, width) in scene pixels


def _grid(scene: SceneSpec, window: Window | None):
    r0, c0, h, w = window or (0, 0, scene.size, scene.size)
    rows = np.arange(r0, r0 + h, dtype=np.float64)[:, None]
    cols = np.arange(c0, c0 + w, dtype=np.float64)[None, :]
    return rows, cols


@lru_cache(maxsize=16)
def _background(scene: SceneSpec, window: Window | None = None) -> np.ndarray:
    n = scene.size
    rng = np.random.default_rng([scene.seed, 7])
    tint = 1.0 + rng.uniform(-0.15, 0.15, 3)
    rows, cols = _grid(scene, window)
    rows, cols = rows / n, cols / n
    zero = 0 * rows * cols
    L = scene.luminance
    style = BACKGROUND_STYLES[scene.background]
    if style == "gradient":
        base = L + 0.15 * (rows - 0.5) * rng.choice([-1, 1]) + zero
    elif style == "stripes":
        period = rng.uniform(0.08, 0.25)
        base = L + 0.08 * np.sin(2 * np.pi * cols / period + rng.uniform(0, 2 * np.pi)) + zero
    elif style == "blotches":
        base = L + zero
        for _ in range(4):
            fr, fc = rng.uniform(0.5, 3.0, 2)
            base = base + 0.03 * np.cos(2 * np.pi * (fr * rows + fc * cols) + rng.uniform(0, 2 * np.pi))
    else:
        cell = rng.uniform(0.06, 0.18)
        base = L + 0.05 * np.where(((rows // cell) + (cols // cell)) % 2 == 0, 1.0, -1.0)
    return np.clip(base, 0.0, 1.0)[..., None] * tint


def _radiance(scene: SceneSpec, x: float, y: float, s: int, phase: float,
              draw_drop: bool, window: Window | None = None) -> np.ndarray:
    r = scene.drop_radius
    img = _background(scene, window).copy()
    rows, cols = _grid(scene, window)
    a, b, tip_off = drop_shape(s, phase, r)
    tip = x - tip_off

    # chamber: hazy vertical band with bright walls
    half = 2.6 * r
    dc = np.abs(cols - y)
    inside = dc <= half
    img = np.where(inside[..., None], 0.8 * img + 0.1, img)
    wall = np.abs(dc - half) < 1.0
    img = np.where(wall[..., None], np.minimum(img + 0.25, 1.0), img)

    # nozzle and spike holder above the tip
    nozzle = (np.abs(cols - y) <= 0.3 * r) & (rows <= tip) & (rows >= tip - 3 * r)
    holder = (np.abs(cols - y) <= 1.2 * r) & (rows < tip - 3 * r) & (rows >= tip - 5 * r)
    img = np.where(nozzle[..., None], (0.22 + 0.08 * (tip - rows) / (3 * r))[..., None], img)
    img = np.where(holder[..., None], 0.35, img)

    if draw_drop:
        dr, dcl = (rows - x) / a, (cols - y) / b
        d = np.sqrt(dr ** 2 + dcl ** 2)
        edge_px = (1.0 - d) * min(a, b)  # approximate distance to the outline
        alpha = np.clip(edge_px + 0.5, 0.0, 1.0)
        rim = max(1.0, 0.18 * b)
        body = 0.55 + 0.3 * np.clip(1.0 - d ** 2, 0.0, 1.0)
        body = np.where(edge_px < rim, 0.08, body)
        hl = 0.6 * np.exp(-(((rows - (x - 0.45 * a)) ** 2 + (cols - (y - 0.35 * b)) ** 2)
                            / (2 * (0.22 * b) ** 2)))
        drop = (body + hl)[..., None] * np.array([0.88, 0.95, 1.0])
        img = img * (1 - alpha[..., None]) + drop * alpha[..., None]
    return img


def render_frame(scene: SceneSpec, x: float, y: float, s: int, phase: float = 0.5, *,
                 noise_key: int = 0, clamp: bool = True, draw_drop: bool = True,
                 window: Window | None = None) -> np.ndarray:
    """Render one (size, size, 3) float32 frame with the drop centred at (x, y).

    Pixel = gain * radiance + gaussian noise, clipped to [0, 1] when ``clamp``.
    ``noise_key`` selects an independent noise draw (frame index in a stream).
    ``window`` renders only the (row0, col0, height, width) part of the frame.
    """
    scene.validate()
    if not (0 <= x < scene.size and 0 <= y < scene.size):
        raise ParameterError(f"drop position ({x}, {y}) outside a {scene.size} px frame")
    if s not in (0, 1) or not 0 <= phase <= 1:
        raise ParameterError("state must be 0/1 and phase in [0, 1]")
    img = scene.gain * _radiance(scene, x, y, s, phase, draw_drop, window)
    if scene.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, 11, noise_key])
        img = img + rng.normal(0.0, scene.noise_sigma, img.shape)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32)


# --------------------------------------------------------------------------
# labels and augmentation
# --------------------------------------------------------------------------

def label_cell(x: float, y: float, W: int, S: int) -> tuple[int, int]:
    # exact rational floor so cell boundaries never suffer float rounding
    return (math.floor(Fraction(x) * S / W), math.floor(Fraction(y) * S / W))


def make_label(x: float, y: float, s: int, W: int, S: int) -> np.ndarray:
    if not (0 <= x < W and 0 <= y < W):
        raise ParameterError(f"position ({x}, {y}) outside [0, {W})")
    if s not in (0, 1):
        raise ParameterError(f"state must be 0 or 1, got {s}")
    i, j = label_cell(x, y, W, S)
    Y = np.zeros((S, S, 2), dtype=np.uint8)
    Y[i, j, s] = 1
    return Y


def augment(sample: LabeledSample, zoom: float, crop_offset: tuple[float, float] | None = None,
            out_size: int | None = None) -> LabeledSample:
    """Bilinear zoom then crop to ``out_size`` (default: the input size).

    ``crop_offset`` is the (row, col) of the crop's top-left corner in the
    zoomed image; default centres the crop.
    """
    if not 0.9 <= zoom <= 1.1:
        raise ParameterError(f"zoom {zoom} outside [0.9, 1.1]")
    H = sample.frame.shape[0]
    W = out_size or H
    if crop_offset is None:
        c = (zoom * H - W) / 2
        crop_offset = (c, c)
    x = zoom * sample.x - crop_offset[0]
    y = zoom * sample.y - crop_offset[1]
    if not (0 <= x < W and 0 <= y < W):
        raise ParameterError(f"crop moves the drop to ({x:.1f}, {y:.1f}), outside the {W} px result")
    frame = imaging.resample(sample.frame, (W, W), (zoom, zoom), crop_offset)
    return LabeledSample(frame.astype(np.float32), x, y, sample.s)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneRanges:
    """Distribution that per-sample scene parameters are drawn from."""
    backgrounds: tuple[int, ...] = (0, 1, 2, 3)
    luminance: tuple[float, float] = (0.05, 0.6)
    gain: tuple[float, float] = (0.3, 1.5)
    noise: tuple[float, float] = (0.0, 0.06)
    radius_frac: tuple[float, float] = (0.05, 0.075)
    zoom: tuple[float, float] = (0.9, 1.1)


@dataclass
class SampleRecord:
    index: int
    x: float
    y: float
    s: int
    W: int
    S: int
    seed: int
    file: str | None = None

    def to_json(self) -> dict:
        return {"file": self.file, "x": self.x, "y": self.y, "s": self.s,
                "W": self.W, "S": self.S, "seed": self.seed}


def random_scene(rng: np.random.Generator, size: int, W: int, ranges: SceneRanges,
                 seed: int, dripper: tuple[float, float] | None = None) -> SceneSpec:
    r = rng.uniform(*ranges.radius_frac) * W
    if dripper is None:
        dripper = (float(rng.uniform(6 * r, size - 3 * r)), float(rng.uniform(3 * r, size - 3 * r)))
    return SceneSpec(size=size, background=int(rng.choice(ranges.backgrounds)),
                     luminance=float(rng.uniform(*ranges.luminance)),
                     gain=float(rng.uniform(*ranges.gain)), dripper=dripper,
                     drop_radius=float(r), noise_sigma=float(rng.uniform(*ranges.noise)),
                     seed=seed)


def build_dataset(count: int, W: int = 128, S: int = 8, seed: int = 0,
                  class_balance: float = 0.5) -> list[SampleRecord]:
    """Manifest of ``count`` samples: balanced states, positions uniform over W x W.

    Frames are not rendered here; :func:`render_sample` recreates each one from
    its record, so the manifest alone reproduces the dataset.
    """
    if count < 2:
        raise ParameterError("dataset needs at least 2 samples")
    rng = np.random.default_rng(seed)
    n1 = int(round(count * class_balance))
    states = np.array([0] * (count - n1) + [1] * n1)
    rng.shuffle(states)
    xs = rng.uniform(0, W, count)
    ys = rng.uniform(0, W, count)
    seeds = rng.integers(0, 2 ** 31, count)
    return [SampleRecord(i, float(xs[i]), float(ys[i]), int(states[i]), W, S, int(seeds[i]))
            for i in range(count)]


def _source_size(W: int) -> tuple[int, int]:
    # big enough that any target position and zoom in [0.9, 1.1] stays inside the source
    xs = math.ceil(W / 0.9) + 1
    return xs, xs + math.ceil((W - 1) / 0.9) + 2


def render_sample(rec: SampleRecord, ranges: SceneRanges = SceneRanges()) -> LabeledSample:
    """Render a source scene with the drop at its centre, then zoom and crop so
    the drop lands exactly on the recorded position."""
    rng = np.random.default_rng(rec.seed)
    centre, size = _source_size(rec.W)
    scene = random_scene(rng, size, rec.W, ranges, seed=rec.seed, dripper=(centre, centre))
    phase = float(rng.uniform(0, 1))
    zoom = float(rng.uniform(*ranges.zoom))
    _, _, tip = drop_shape(rec.s, phase, scene.drop_radius)
    scene = replace(scene, dripper=(centre - tip, float(centre)))
    offset = (zoom * centre - rec.x, zoom * centre - rec.y)
    # only the source pixels the crop samples (plus one for bilinear support)
    r0 = max(0, int(math.floor(offset[0] / zoom)) - 1)
    c0 = max(0, int(math.floor(offset[1] / zoom)) - 1)
    r1 = min(size, int(math.ceil((rec.W - 1 + offset[0]) / zoom)) + 2)
    c1 = min(size, int(math.ceil((rec.W - 1 + offset[1]) / zoom)) + 2)
    part = render_frame(scene, centre, centre, rec.s, phase, noise_key=rec.index,
                        window=(r0, c0, r1 - r0, c1 - c0))
    frame = imaging.resample(part, (rec.W, rec.W), (zoom, zoom),
                             (offset[0] - zoom * r0, offset[1] - zoom * c0))
    return LabeledSample(frame.astype(np.float32), rec.x, rec.y, rec.s)


@dataclass
class Dataset:
    frames: np.ndarray  # (n, W, W, 3) uint8
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    W: int
    S: int

    def __len__(self):
        return len(self.s)

    def labels(self, idx=None) -> np.ndarray:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        Y = np.zeros((len(idx), self.S, self.S, 2), dtype=np.float32)
        for n, k in enumerate(idx):
            i, j = label_cell(float(self.x[k]), float(self.y[k]), self.W, self.S)
            Y[n, i, j, int(self.s[k])] = 1
        return Y

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.frames[idx], self.x[idx], self.y[idx], self.s[idx], self.W, self.S)


def materialize(records: Sequence[SampleRecord], ranges: SceneRanges = SceneRanges()) -> Dataset:
    if not records:
        raise ParameterError("empty manifest")
    W, S = records[0].W, records[0].S
    frames = np.empty((len(records), W, W, 3), dtype=np.uint8)
    for k, rec in enumerate(records):
        frames[k] = imaging.to_bytes(render_sample(rec, ranges).frame)
    return Dataset(frames, np.array([r.x for r in records]), np.array([r.y for r in records]),
                   np.array([r.s for r in records]), W, S)


def write_dataset(records: Sequence[SampleRecord], out_dir, ranges: SceneRanges = SceneRanges()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in records:
            rec.file = f"{rec.index:06d}.ppm"
            imaging.write_ppm(out / rec.file, imaging.to_bytes(render_sample(rec, ranges).frame))
            fh.write(json.dumps(rec.to_json()) + "\n")
    return out


def read_dataset(split_dir) -> Dataset:
    d = Path(split_dir)
    recs = [json.loads(line) for line in (d / "manifest.jsonl").read_text().splitlines() if line.strip()]
    if not recs:
        raise ParameterError(f"empty manifest in {d}")
    frames = np.stack([imaging.read_ppm(d / r["file"]) for r in recs])
    return Dataset(frames, np.array([r["x"] for r in recs], dtype=float),
                   np.array([r["y"] for r in recs], dtype=float),
                   np.array([r["s"] for r in recs], dtype=int), recs[0]["W"], recs[0]["S"])


# --------------------------------------------------------------------------
# oracle streams
# --------------------------------------------------------------------------

@dataclass
class DripStreamSpec:
    duration: float
    fps: float
    drop_period: float | Sequence[tuple[float, float]]  # constant, or [(t_start, period), ...]
    forming_fraction: float = 0.5
    scene: SceneSpec = field(default_factory=SceneSpec)
    tail_frames: int = 15  # frames past ``duration``, free of new detaches, so a detach at the very end is observable

    def segments(self) -> list[tuple[float, float]]:
        if isinstance(self.drop_period, (int, float)):
            return [(0.0, float(self.drop_period))]
        segs = sorted((float(t), float(p)) for t, p in self.drop_period)
        if not segs or segs[0][0] > 0:
            raise ParameterError("period schedule must start at t=0")
        return segs

    def validate(self) -> None:
        if self.fps <= 0 or self.duration <= 0:
            raise ParameterError("fps and duration must be positive")
        if not 0 < self.forming_fraction < 1:
            raise ParameterError("forming fraction must be in (0, 1)")
        if any(p <= 2 / self.fps for _, p in self.segments()):
            raise ParameterError("drop period must exceed two frame intervals")
        self.scene.validate()


@dataclass
class OracleStream:
    spec: DripStreamSpec
    times: np.ndarray
    states: np.ndarray
    phases: np.ndarray
    detach_times: list[float]

    def __len__(self):
        return len(self.times)

    def render(self, k: int) -> np.ndarray:
        scene = self.spec.scene
        s, ph = int(self.states[k]), float(self.phases[k])
        x, y = drop_center(scene, s, ph)
        return render_frame(scene, x, y, s, ph, noise_key=k)

    def frames(self) -> Iterator[np.ndarray]:
        """uint8 RGB frames in order."""
        for k in range(len(self)):
            yield imaging.to_bytes(self.render(k))

    def truth_records(self) -> list[dict]:
        return [{"frame_index": k, "t_seconds": float(t), "state": int(s)}
                for k, (t, s) in enumerate(zip(self.times, self.states))]


def _drop_starts(segs: list[tuple[float, float]], until: float) -> tuple[list[float], list[float]]:
    """Start instants of successive drops and each drop's period (the one in force at its start)."""
    starts, periods = [0.0], []
    seg_t = [t for t, _ in segs]
    while True:
        b = starts[-1]
        p = segs[bisect.bisect_right(seg_t, b + 1e-12) - 1][1]
        periods.append(p)
        if b > until:
            break
        starts.append(b + p)
    return starts, periods


def gen_stream(spec: DripStreamSpec) -> OracleStream:
    """Per-frame ground-truth states, phases and detach instants for a drip stream.

    Each drop spends its first ``forming_fraction`` of the period in state 0
    and the rest in state 1; drop boundaries in (0, duration] are the detach
    instants. The tail frames past ``duration`` continue the last drop, which
    hangs at full size instead of detaching, so the truth count is exactly the
    detaches up to ``duration``.
    """
    spec.validate()
    n = int(math.floor(spec.duration * spec.fps + 1e-9)) + spec.tail_frames
    times = np.arange(n) / spec.fps
    starts, periods = _drop_starts(spec.segments(), spec.duration)
    last = bisect.bisect_right(starts, spec.duration + 1e-9)
    starts, periods = starts[:last], periods[:last]
    k = np.searchsorted(np.array(starts), times + 1e-9, side="right") - 1
    b, p = np.array(starts)[k], np.array(periods)[k]
    ff = spec.forming_fraction
    frac = np.clip((times - b) / p, 0.0, 1.0)
    states = (frac + 1e-9 >= ff).astype(np.int8)
    phases = np.where(states == 0, frac / ff, (frac - ff) / (1 - ff)).clip(0.0, 1.0)
    detach = [float(t) for t in starts[1:]]
    return OracleStream(spec, times, states, phases, detach)


def write_stream(stream: OracleStream, out_dir, container: str = "drpv") -> Path:
    """Write frames (DRPV container or PPM directory) plus truth.jsonl and detach.jsonl."""
    from .streamd.container import write_drpv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if container == "drpv":
        size = stream.spec.scene.size
        fps = Fraction(stream.spec.fps).limit_denominator(1000)
        write_drpv(out / "frames.drpv", size, size, fps.numerator, fps.denominator, stream.frames())
    elif container == "ppm":
        (out / "frames").mkdir(exist_ok=True)
        for k, f in enumerate(stream.frames()):
            imaging.write_ppm(out / "frames" / f"{k:06d}.ppm", f)
    else:
        raise ParameterError(f"unknown container {container!r}")
    with open(out / "truth.jsonl", "w") as fh:
        for rec in stream.truth_records():
            fh.write(json.dumps(rec) + "\n")
    with open(out / "detach.jsonl", "w") as fh:
        for t in stream.detach_times:
            fh.write(json.dumps({"t_seconds": t}) + "\n")
    return out
