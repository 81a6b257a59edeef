"""Config-driven multi-stream runs, throughput benchmarking and heatmap export."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import imaging
from ..dripcount import CounterConfig, StreamMonitor
from ..dropnet import DropNet, load_weights
from ..synthdrip import DripStreamSpec, SceneSpec, gen_stream
from .engine import LiveSource, StreamBatch, StreamSource, collect_batch, infer_and_route, preprocess

log = logging.getLogger(__name__)

DEFAULT_MARGIN_FACTOR = 0.875
BENCH_BATCH_SIZES = (1, 2, 4, 8)
FLOW_FIELDS = ("stream_id", "t", "q_gtt_min", "window_n")


class PipelineConfigError(ValueError):
    """Bad config file, stream definition or weight file (CLI exit code 1)."""


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    weights: Path
    streams: list[StreamSource]
    counter: CounterConfig = field(default_factory=CounterConfig)
    out_dir: Path = Path("out")
    n_f: int = 1
    timeout: float = 1.0
    chunk: int = 32
    dtype: str = "float32"


def _section(raw: dict, key: str, required: bool = False) -> dict:
    sec = raw.get(key, {} if not required else None)
    if not isinstance(sec, dict):
        raise PipelineConfigError(f"config section {key!r} must be an object")
    return sec


def parse_config(raw: dict, base: Path = Path(".")) -> PipelineConfig:
    """Build a :class:`PipelineConfig` from a decoded JSON object; paths resolve against ``base``."""
    if not isinstance(raw, dict):
        raise PipelineConfigError("config must be a JSON object")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    model = _section(raw, "model", True)
    if "weights" not in model:
        raise PipelineConfigError("model.weights is required")
    overrides = model.get("overrides", {})
    unknown = set(overrides) - {"chunk", "dtype"}
    if unknown:
        raise PipelineConfigError(f"unsupported net overrides {sorted(unknown)}")
    if overrides.get("dtype", "float32") not in ("float32", "float64"):
        raise PipelineConfigError("overrides.dtype must be float32 or float64")

    streams_raw = raw.get("streams")
    if not isinstance(streams_raw, list) or not streams_raw:
        raise PipelineConfigError("streams must be a nonempty list")
    streams, seen = [], set()
    for k, s in enumerate(streams_raw):
        try:
            sid = str(s.get("id", f"s{k}"))
            if sid in seen:
                raise PipelineConfigError(f"duplicate stream id {sid!r}")
            seen.add(sid)
            path = s.get("path")
            if path is not None and path != "-":
                path = str(resolve(path))
            streams.append(StreamSource(sid, s.get("transport", "drpv"), path, s.get("fps"),
                                        s.get("width"), s.get("height")))
        except (AttributeError, TypeError, ValueError) as e:
            raise PipelineConfigError(f"stream {k}: {e}") from e

    try:
        counter = CounterConfig(**_section(raw, "counter"))
    except TypeError as e:
        raise PipelineConfigError(f"counter: {e}") from e
    if not 0 < counter.tau < 1 or counter.debounce_m < 1 or counter.window_n < 1 or counter.margin_cells < 0:
        raise PipelineConfigError(f"invalid counter settings {counter}")
    batch = _section(raw, "batch")
    out = _section(raw, "output")
    cfg = PipelineConfig(resolve(model["weights"]), streams, counter, resolve(out.get("dir", "out")),
                         int(batch.get("n_f", 1)), float(batch.get("timeout", 1.0)),
                         int(overrides.get("chunk", 32)), overrides.get("dtype", "float32"))
    if cfg.n_f < 1 or cfg.timeout < 0 or cfg.chunk < 1:
        raise PipelineConfigError("batch.n_f and overrides.chunk must be >= 1, batch.timeout >= 0")
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise PipelineConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(raw, path.parent)


def load_net(weights: Path, dtype: str = "float32") -> DropNet:
    try:
        net = load_weights(weights)
    except (OSError, ValueError) as e:
        raise PipelineConfigError(f"cannot load weights {weights}: {e}") from e
    if dtype == "float64":
        net = net.astype(np.float64)
    return net.eval()


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

@dataclass
class ThroughputReport:
    frames_processed: int
    wall_seconds: float
    fps_achieved: float
    batch_size: int
    streams: int
    latency: dict[str, float]  # seconds per frame: preprocess, infer, decode

    @classmethod
    def measure(cls, frames: int, wall: float, batch_size: int, streams: int, stage_totals: dict):
        per = {k: (stage_totals.get(k, 0.0) / frames if frames else 0.0)
               for k in ("preprocess", "infer", "decode")}
        return cls(frames, wall, frames / wall if wall > 0 else 0.0, batch_size, streams, per)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunSummary:
    counts: dict[str, int]
    frames: dict[str, int]
    dropped: dict[str, str]
    records: list[dict]
    report: ThroughputReport


def run(cfg: PipelineConfig, net: DropNet | None = None) -> RunSummary:
    """Process every configured stream to exhaustion (or until interrupted) and write the logs.

    Everything that can fail on bad input (weights, stream headers) is checked
    before the output directory is touched.
    """
    if net is None:
        net = load_net(cfg.weights, cfg.dtype)
    W, S = net.config.input_size, net.config.grid_size
    live = []
    try:
        for src in cfg.streams:
            live.append(LiveSource(src))
    except (OSError, ValueError) as e:
        raise PipelineConfigError(f"cannot open stream {src.stream_id}: {e}") from e
    monitors = {s.stream_id: StreamMonitor(s.stream_id, S, cfg.counter) for s in cfg.streams}
    frames = {s.stream_id: 0 for s in cfg.streams}
    records: list[dict] = []
    stats: dict[str, float] = {}

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    with open(cfg.out_dir / "events.jsonl", "w") as ev_fh, open(cfg.out_dir / "flow.csv", "w", newline="") as fl_fh:
        flow_w = csv.DictWriter(fl_fh, FLOW_FIELDS, extrasaction="ignore")
        flow_w.writeheader()

        def emit(batch: StreamBatch):
            for sid, _, _ in batch.provenance:
                frames[sid] += 1
            for rec in infer_and_route(net, batch, monitors, stats):
                records.append(rec)
                if rec["kind"] == "flow":
                    flow_w.writerow(rec)
                else:
                    ev_fh.write(json.dumps(rec) + "\n")

        try:
            while True:
                active = [s for s in live if not s.exhausted]
                if not active:
                    break
                batch = collect_batch(active, cfg.n_f, cfg.timeout, W, stats)
                if len(batch):
                    emit(batch)
        except KeyboardInterrupt:
            log.info("interrupted; draining queued frames")
            for s in live:
                while (f := s.poll(0.0)) is not None:
                    emit(StreamBatch(preprocess(f.pixels, W)[None], [(f.stream_id, f.frame_index, f.t)]))
    wall = time.perf_counter() - t_start

    n = sum(frames.values())
    report = ThroughputReport.measure(n, wall, cfg.n_f * len(cfg.streams), len(cfg.streams), stats)
    dropped = {s.stream_id: str(s.error) for s in live if s.error is not None}
    summary = RunSummary({k: m.drop_count for k, m in monitors.items()}, frames, dropped, records, report)
    with open(cfg.out_dir / "report.json", "w") as fh:
        json.dump({"streams": {sid: {"drop_count": summary.counts[sid], "frames": frames[sid],
                                     "dropped": sid in dropped, "error": dropped.get(sid)}
                               for sid in monitors},
                   "throughput": report.to_dict()}, fh, indent=2)
    return summary


def run_pipeline(config_path) -> int:
    """CLI-facing wrapper: 0 on success, 1 for config/weight problems, 2 for runtime failures."""
    try:
        cfg = load_config(config_path)
        run(cfg)
    except PipelineConfigError as e:
        log.error("%s", e)
        return 1
    except Exception as e:  # anything else is a runtime failure
        log.error("pipeline failed: %s", e)
        return 2
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def max_streams(fps_achieved: float, stream_fps: float, margin: float = DEFAULT_MARGIN_FACTOR) -> int:
    """Streams sustainable at ``stream_fps`` each, after derating throughput by ``margin``."""
    if stream_fps <= 0 or not 0 < margin <= 1:
        raise ValueError("stream_fps must be positive and margin in (0, 1]")
    return int(math.floor(fps_achieved * margin / stream_fps + 1e-9))


@dataclass
class BenchResult:
    reports: list[ThroughputReport]
    stream_fps: float
    margin: float

    def best(self) -> ThroughputReport:
        return max(self.reports, key=lambda r: r.fps_achieved)

    def max_streams(self) -> int:
        return max_streams(self.best().fps_achieved, self.stream_fps, self.margin)

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.reports], "stream_fps": self.stream_fps,
                "margin": self.margin, "max_streams": self.max_streams()}


def bench_frames(count: int, height: int, width: int, seed: int = 0) -> list[np.ndarray]:
    """Raw uint8 frames from an oracle stream, rendered at ``height`` x ``width``."""
    size = max(height, width)
    scene = SceneSpec(size=size, dripper=(size * 3 / 8, size / 2), drop_radius=size / 16, seed=seed)
    stream = gen_stream(DripStreamSpec(duration=count / 30, fps=30, drop_period=1.0, scene=scene, tail_frames=1))
    r0, c0 = (size - height) // 2, (size - width) // 2
    return [f[r0:r0 + height, c0:c0 + width] for _, f in zip(range(count), stream.frames())]


def bench(net: DropNet, frames: list[np.ndarray], batch_sizes=BENCH_BATCH_SIZES, stream_fps: float = 30.0,
          margin: float = DEFAULT_MARGIN_FACTOR, repeats: int = 3) -> BenchResult:
    """Throughput of preprocess -> infer -> decode for each batch size over pre-generated frames.

    A batch of size b holds one frame from each of b streams. Each size is run
    ``repeats`` times and the fastest run is reported.
    """
    net.eval()
    W, S = net.config.input_size, net.config.grid_size
    net.forward(preprocess(frames[0], W)[None])  # warm-up
    reports = []
    for b in batch_sizes:
        best = None
        for _ in range(repeats):
            monitors = {f"s{i}": StreamMonitor(f"s{i}", S) for i in range(b)}
            stats: dict[str, float] = {}
            n = len(frames) - len(frames) % b
            t0 = time.perf_counter()
            for start in range(0, n, b):
                tp = time.perf_counter()
                x = np.stack([preprocess(f, W) for f in frames[start:start + b]])
                stats["preprocess"] = stats.get("preprocess", 0.0) + time.perf_counter() - tp
                prov = [(f"s{i}", start // b, (start // b) / stream_fps) for i in range(b)]
                infer_and_route(net, StreamBatch(x, prov), monitors, stats)
            rep = ThroughputReport.measure(n, time.perf_counter() - t0, b, b, stats)
            if best is None or rep.fps_achieved > best.fps_achieved:
                best = rep
        reports.append(best)
        log.info("batch %d: %.1f fps", b, best.fps_achieved)
    return BenchResult(reports, stream_fps, margin)


# --------------------------------------------------------------------------
# heatmap
# --------------------------------------------------------------------------

def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 with round-half-up: floor(255 v + 0.5)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise ValueError("heatmap values must lie in [0, 1]")
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def emit_heatmap(grid: np.ndarray, path) -> tuple[Path, Path]:
    """Write layer 0 and layer 1 of an S x S x 2 grid as ``<stem>_k0.pgm`` / ``<stem>_k1.pgm``."""
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[2] != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"expected an S x S x 2 grid, got {grid.shape}")
    path = Path(path)
    stem = path.with_suffix("") if path.suffix.lower() == ".pgm" else path
    q = quantize(grid)
    out = (stem.parent / f"{stem.name}_k0.pgm", stem.parent / f"{stem.name}_k1.pgm")
    for k, p in enumerate(out):
        imaging.write_pgm(p, q[:, :, k])
    return out
