"""Command-line entry point: ``ivdrip <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import dropnet, imaging, synthdrip, trainer
from .pipeline import (BENCH_BATCH_SIZES, DEFAULT_MARGIN_FACTOR, PipelineConfigError, bench, bench_frames,
                       emit_heatmap, load_net, preprocess, run_pipeline)

log = logging.getLogger("ivdrip")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def parse_period(text: str):
    """``"2.0"`` -> 2.0; ``"0:2.0,60:1.5"`` -> [(0.0, 2.0), (60.0, 1.5)]."""
    try:
        if ":" not in text:
            return float(text)
        return [(float(a), float(b)) for a, b in (part.split(":") for part in text.split(","))]
    except ValueError as e:
        raise UsageError(f"bad period {text!r}: {e}") from e


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_dataset(args) -> int:
    records = synthdrip.build_dataset(args.count, args.size, args.grid, args.seed)
    tr_idx, va_idx = trainer.split_indices(len(records), args.split, args.seed)
    out = Path(args.out)
    synthdrip.write_dataset([records[i] for i in tr_idx], out / "train")
    synthdrip.write_dataset([records[i] for i in va_idx], out / "val")
    log.info("wrote %d train / %d val samples under %s", len(tr_idx), len(va_idx), out)
    return EXIT_OK


def cmd_gen_stream(args) -> int:
    size = args.size
    scene = synthdrip.SceneSpec(size=size, background=args.background, luminance=args.luminance,
                                gain=args.gain, dripper=(size * 3 / 8, size / 2), drop_radius=size / 16,
                                noise_sigma=args.noise, seed=args.seed)
    spec = synthdrip.DripStreamSpec(args.duration, args.fps, parse_period(args.period),
                                    args.forming, scene)
    try:
        stream = synthdrip.gen_stream(spec)
    except synthdrip.ParameterError as e:
        raise UsageError(str(e)) from e
    synthdrip.write_stream(stream, args.out, args.container)
    log.info("wrote %d frames, %d detaches to %s", len(stream), len(stream.detach_times), args.out)
    return EXIT_OK


def _load_training_data(args):
    if args.data:
        d = Path(args.data)
        if (d / "train").is_dir():
            return synthdrip.read_dataset(d / "train"), synthdrip.read_dataset(d / "val")
        return synthdrip.read_dataset(d), None
    return synthdrip.materialize(synthdrip.build_dataset(args.count, seed=args.seed)), None


def cmd_train(args) -> int:
    extra = _json_config(args.config)
    fields = {k: extra.pop(k) for k in list(extra) if k in trainer.TrainConfig.__dataclass_fields__}
    cfg = trainer.TrainConfig(**{"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
                                 "seed": args.seed, "loss_form": args.loss, **fields})
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    data, val = _load_training_data(args)
    if args.net == "desk":
        net_cfg = dropnet.NetConfig.desk(seed=args.seed)
    else:
        net_cfg = dropnet.NetConfig(seed=args.seed)
    if data.W != net_cfg.input_size or data.S != net_cfg.grid_size:
        raise UsageError(f"data is {data.W}/{data.S} but the {args.net} net expects "
                         f"{net_cfg.input_size}/{net_cfg.grid_size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, hist = trainer.train(dropnet.build(net_cfg), data, cfg, val=val, history_csv=out / "history.csv")
    dropnet.save_weights(net, out / "weights.drpw")
    last = hist.records[-1]
    print(json.dumps({"best_epoch": hist.best_epoch, "val_state_acc": last.val_state_acc,
                      "val_cell_acc": last.val_cell_acc}))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = load_net(Path(args.weights))
    except PipelineConfigError as e:
        raise UsageError(str(e)) from e
    data = synthdrip.read_dataset(args.data)
    metrics = trainer.evaluate(net, data)
    metrics["loss"] = trainer.loss(data.labels(), trainer.predict(net, data)) / len(data)
    print(json.dumps(metrics))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_run(args) -> int:
    if args.config is None:
        raise UsageError("run needs --config")
    return run_pipeline(args.config)


def cmd_bench(args) -> int:
    cfg = _json_config(args.config)
    weights = args.weights or cfg.get("model", {}).get("weights")
    if weights is None:
        raise UsageError("bench needs --weights or model.weights in --config")
    if args.config and not Path(weights).is_absolute():
        weights = Path(args.config).parent / weights
    b = cfg.get("bench", {})
    try:
        net = load_net(Path(weights))
    except PipelineConfigError as e:
        raise UsageError(str(e)) from e
    W = net.config.input_size
    height = b.get("height", args.height or W)
    width = b.get("width", args.width or W)
    frames = bench_frames(b.get("frames", args.frames), height, width, args.seed)
    res = bench(net, frames, tuple(b.get("batch_sizes", BENCH_BATCH_SIZES)), b.get("stream_fps", args.stream_fps),
                b.get("margin", args.margin), b.get("repeats", 3))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(res.to_dict(), indent=2))
    for r in res.reports:
        print(f"batch {r.batch_size}: {r.fps_achieved:.1f} fps "
              + " ".join(f"{k}={v * 1e3:.2f}ms" for k, v in r.latency.items()))
    print(f"max streams at {res.stream_fps:g} fps (margin {res.margin:g}): {res.max_streams()}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    try:
        net = load_net(Path(args.weights))
    except PipelineConfigError as e:
        raise UsageError(str(e)) from e
    W = net.config.input_size
    if args.frame:
        raw = imaging.read_ppm(args.frame)
        stem = Path(args.frame).stem
    else:
        raw = bench_frames(1, W, W, args.seed)[0]
        stem = f"synthetic_{args.seed}"
    grid = net.forward(preprocess(raw, W)[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in emit_heatmap(grid, out / stem):
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ivdrip", description="IV drip drop detection, counting and flow-rate monitoring")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-dataset", parents=[common], help="render a labelled synthetic dataset")
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--size", type=int, default=128, help="frame size W")
    g.add_argument("--grid", type=int, default=8, help="grid size S")
    g.add_argument("--split", type=float, default=0.8)
    g.set_defaults(func=cmd_gen_dataset)

    g = sub.add_parser("gen-stream", parents=[common], help="render an oracle drip video")
    g.add_argument("--duration", type=float, default=60.0)
    g.add_argument("--fps", type=float, default=30.0)
    g.add_argument("--period", default="2.0", help="seconds, or t:period,t:period for a schedule")
    g.add_argument("--forming", type=float, default=0.5, help="fraction of each period in state 0")
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--background", type=int, default=0, choices=range(len(synthdrip.BACKGROUND_STYLES)))
    g.add_argument("--luminance", type=float, default=0.3)
    g.add_argument("--gain", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--container", choices=("drpv", "ppm"), default="drpv")
    g.set_defaults(func=cmd_gen_stream)

    g = sub.add_parser("train", parents=[common], help="train a network")
    g.add_argument("--data", default=None, help="dataset dir (with train/ and val/) or one manifest dir")
    g.add_argument("--count", type=int, default=2000, help="samples to render when --data is absent")
    g.add_argument("--net", choices=("desk", "reference"), default="desk")
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--loss", choices=trainer.LOSS_FORMS, default="bce")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", parents=[common], help="score weights on a dataset split")
    g.add_argument("--weights", required=True)
    g.add_argument("--data", required=True)
    g.set_defaults(func=cmd_eval, out=None)

    g = sub.add_parser("run", parents=[common], help="run the multi-stream pipeline from a config")
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("bench", parents=[common], help="measure throughput at batch sizes 1, 2, 4, 8")
    g.add_argument("--weights", default=None)
    g.add_argument("--frames", type=int, default=64)
    g.add_argument("--height", type=int, default=None)
    g.add_argument("--width", type=int, default=None)
    g.add_argument("--stream-fps", type=float, default=30.0)
    g.add_argument("--margin", type=float, default=DEFAULT_MARGIN_FACTOR)
    g.set_defaults(func=cmd_bench)

    g = sub.add_parser("heatmap", parents=[common], help="write the output grid of one frame as PGMs")
    g.add_argument("--weights", required=True)
    g.add_argument("--frame", default=None, help="PPM frame (default: a synthetic one)")
    g.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ivdrip {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"ivdrip {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
