"""The drop-state network: a fully convolutional stack mapping a W x W RGB
frame to an S x S x 2 grid of per-cell, per-state sigmoid scores."""
from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as tnn

MAGIC = b"DRPW"
FORMAT_VERSION = 1

REFERENCE_WIDTHS = (16, 32, 64, 128, 256)
DESK_WIDTHS = (8, 16, 32, 64, 64)
# per-block working set for inference; keeps the large early layers cache resident
INFER_BLOCK_BYTES = 1 << 21


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class TruncatedFileError(FormatError, OSError):
    pass


def make_stack(widths=REFERENCE_WIDTHS, dropout: float = 0.2, pools: int = 4,
               dropout_layers: int = 2, in_channels: int = 3) -> list[dict]:
    """Hidden 5x5 conv blocks (conv, BN, leaky ReLU[, dropout][, pool]) then a 1x1 head.

    The first ``pools`` blocks end in a 2x2 max pool; the last ``dropout_layers``
    blocks carry dropout before pooling.
    """
    stack: list[dict] = []
    cin = in_channels
    nblocks = len(widths)
    for b, cout in enumerate(widths):
        stack += [{"type": "conv", "k": 5, "in": cin, "out": cout},
                  {"type": "batchnorm"},
                  {"type": "leaky_relu"}]
        if dropout > 0 and b >= nblocks - dropout_layers:
            stack.append({"type": "dropout", "rate": dropout})
        if b < pools:
            stack.append({"type": "maxpool"})
        cin = cout
    stack += [{"type": "conv", "k": 1, "in": cin, "out": 2}, {"type": "sigmoid"}]
    return stack


@dataclass
class NetConfig:
    input_size: int = 416
    grid_size: int = 26
    layer_stack: list[dict] = field(default_factory=make_stack)
    seed: int = 0
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    leaky_slope: float = 0.1

    @classmethod
    def desk(cls, seed: int = 0, widths=DESK_WIDTHS) -> "NetConfig":
        return cls(input_size=128, grid_size=8, layer_stack=make_stack(widths), seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def validate(self) -> None:
        W, S, stack = self.input_size, self.grid_size, self.layer_stack
        if W <= 0 or S <= 0 or W % S:
            raise ConfigError(f"input_size {W} must be a positive multiple of grid_size {S}")
        pools = sum(1 for l in stack if l["type"] == "maxpool")
        if 2 ** pools != W // S:
            raise ConfigError(f"pool downsampling {2 ** pools} != input_size/grid_size = {W // S}")
        convs = [l for l in stack if l["type"] == "conv"]
        if len(stack) < 2 or stack[-1]["type"] != "sigmoid" or stack[-2]["type"] != "conv":
            raise ConfigError("stack must end with a 1x1 conv followed by sigmoid")
        head = stack[-2]
        if head["k"] != 1 or head["out"] != 2:
            raise ConfigError("final layer must be a 1x1 conv to 2 channels")
        if convs[0]["in"] != 3:
            raise ConfigError("first conv must take 3 input channels")
        hidden = convs[:-1]
        if any(c["k"] != 5 for c in hidden):
            raise ConfigError("hidden convolutions must be 5x5")
        for a, b in zip(convs, convs[1:]):
            if a["out"] != b["in"]:
                raise ConfigError(f"conv channel chain broken: {a['out']} -> {b['in']}")
        for a, b in zip(hidden, hidden[1:]):
            if b["out"] < a["out"]:
                raise ConfigError("hidden conv channel counts must be nondecreasing")
        # every hidden conv must be activated by leaky ReLU before the next conv
        seen_conv = False
        for l in stack[:-2]:
            if l["type"] == "conv":
                if seen_conv:
                    raise ConfigError("hidden conv without leaky ReLU activation")
                seen_conv = True
            elif l["type"] == "leaky_relu":
                seen_conv = False
            elif l["type"] == "sigmoid":
                raise ConfigError("sigmoid is only allowed as the final activation")
            elif l["type"] not in ("batchnorm", "maxpool", "dropout"):
                raise ConfigError(f"unknown layer type {l['type']!r}")
        if seen_conv:
            raise ConfigError("hidden conv without leaky ReLU activation")


class DropNet:
    def __init__(self, config: NetConfig, layers: list[tnn.Layer], mode: str = "infer"):
        self.config = config
        self.layers = layers
        self.mode = mode

    # -- parameters -----------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything that must be persisted: trainable params plus BN running stats."""
        return {**self.parameters(), **self.buffers()}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def train(self) -> "DropNet":
        self.mode = "train"
        return self

    def eval(self) -> "DropNet":
        self.mode = "infer"
        return self

    def reseed(self, seed: int) -> None:
        """Reset the dropout generators (they share one stream per net)."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, tnn.Dropout):
                layer.rng = rng

    def astype(self, dtype) -> "DropNet":
        """Deep copy with every array cast to ``dtype`` (used for float64 gradient checks)."""
        net = copy.deepcopy(self)
        for layer in net.layers:
            if isinstance(layer, tnn.Conv2D):
                layer.p.weights = layer.p.weights.astype(dtype)
                layer.p.bias = layer.p.bias.astype(dtype)
            elif isinstance(layer, tnn.BatchNorm):
                for f in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(layer.p, f, getattr(layer.p, f).astype(dtype))
        return net

    # -- passes ---------------------------------------------------------
    def forward(self, frames: np.ndarray, chunk: int = 32) -> np.ndarray:
        """(n, W, W, 3) frames in [0, 1] -> (n, S, S, 2) grids.

        Infer mode runs in chunks of ``chunk`` frames; train mode runs the
        whole batch at once (batch-norm statistics depend on it) and caches
        activations for :meth:`backward`.
        """
        W = self.config.input_size
        tnn.check_tensor4(frames, 3)
        if frames.shape[1:3] != (W, W):
            raise tnn.ShapeError(f"expected {W}x{W} frames, got {frames.shape[1]}x{frames.shape[2]}")
        if self.mode == "train":
            return tnn.forward(self.layers, frames, train=True)
        outs = [self._infer(frames[i:i + chunk]) for i in range(0, len(frames), chunk)]
        return np.concatenate(outs, axis=0)

    def _infer(self, x: np.ndarray) -> np.ndarray:
        """Infer-mode pass, one spatial resolution at a time.

        Each run of layers between pools is applied to as many frames as fit
        in INFER_BLOCK_BYTES, so early high-resolution layers go frame by
        frame while the small late layers see the whole batch. Every frame
        gets the same arithmetic either way.
        """
        for seg in self._segments:
            h, w = x.shape[1:3]
            per_frame = max(h * w * width for width in self._segment_widths(seg, x.shape[3])) * x.itemsize
            step = max(1, INFER_BLOCK_BYTES // per_frame)
            if step >= len(x):
                x = tnn.forward(seg, x)
            else:
                x = np.concatenate([tnn.forward(seg, x[i:i + step]) for i in range(0, len(x), step)])
        return x

    @staticmethod
    def _segment_widths(seg, channels: int):
        """Per-pixel element counts of the segment's largest buffers (im2col rows, activations)."""
        yield channels
        for layer in seg:
            if isinstance(layer, tnn.Conv2D):
                yield layer.p.kernel_size ** 2 * layer.p.in_channels
                yield layer.p.out_channels

    @property
    def _segments(self) -> list[list[tnn.Layer]]:
        segs, cur = [], []
        for layer in self.layers:
            cur.append(layer)
            if isinstance(layer, tnn.MaxPool2):
                segs.append(cur)
                cur = []
        return segs + [cur] if cur else segs

    def backward(self, upstream: np.ndarray, input_grad: bool = True) -> tnn.GradientSet:
        return tnn.backward(self.layers, upstream, input_grad)

    def backward_from_logits(self, dlogits: np.ndarray, input_grad: bool = True) -> tnn.GradientSet:
        """Backprop a gradient taken w.r.t. the pre-sigmoid head output."""
        return tnn.backward(self.layers[:-1], dlogits, input_grad)


def build(config: NetConfig) -> DropNet:
    config.validate()
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    layers: list[tnn.Layer] = []
    ch = 3
    counts: dict[str, int] = {}

    def name(kind):
        i = counts.get(kind, 0)
        counts[kind] = i + 1
        return f"{kind}{i}"

    for spec in config.layer_stack:
        t = spec["type"]
        if t == "conv":
            layers.append(tnn.Conv2D(tnn.ConvParams.he_init(spec["k"], spec["in"], spec["out"], rng),
                                     name("conv")))
            ch = spec["out"]
        elif t == "batchnorm":
            p = tnn.BatchNormParams.identity(ch, epsilon=config.bn_epsilon, momentum=config.bn_momentum)
            layers.append(tnn.BatchNorm(p, name("bn")))
        elif t == "leaky_relu":
            layers.append(tnn.LeakyReLU(config.leaky_slope, name("lrelu")))
        elif t == "maxpool":
            layers.append(tnn.MaxPool2(name("pool")))
        elif t == "dropout":
            layers.append(tnn.Dropout(spec["rate"], drop_rng, name("dropout")))
        elif t == "sigmoid":
            layers.append(tnn.Sigmoid(name("sigmoid")))
    return DropNet(config, layers)


# --------------------------------------------------------------------------
# weight file
# --------------------------------------------------------------------------

def dumps_weights(net: DropNet) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    blob = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    arrays = net.state_arrays()
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF)
    return bytes(buf)


def _parse_body(body: memoryview) -> tuple[NetConfig, dict[str, np.ndarray]]:
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise TruncatedFileError("weight file truncated")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (blen,) = take("<I")
    if pos + blen > len(body):
        raise TruncatedFileError("config blob overruns file")
    try:
        config = NetConfig.from_dict(json.loads(bytes(body[pos:pos + blen]).decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise FormatError(f"bad config blob: {e}") from e
    pos += blen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(body):
            raise TruncatedFileError("array name overruns file")
        try:
            name = bytes(body[pos:pos + nlen]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"bad array name: {e}") from e
        pos += nlen
        (rank,) = take("<B")
        dims = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(body):
            raise TruncatedFileError(f"payload of {name!r} shorter than declared shape {dims}")
        arrays[name] = np.frombuffer(body[pos:pos + nbytes], dtype="<f4").reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} bytes after last array disagree with the shape table")
    return config, arrays


def loads_weights(data: bytes) -> DropNet:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedFileError("weight file truncated")
    body = memoryview(data)[:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    crc_ok = zlib.crc32(body) & 0xFFFFFFFF == crc
    try:
        config, arrays = _parse_body(body)
    except FormatError as e:
        if crc_ok:
            raise
        # a damaged table can look like a short file: report the checksum, keep the error type
        raise type(e)(f"CRC-32 mismatch ({e})") from e
    if not crc_ok:
        raise FormatError("CRC-32 mismatch")

    try:
        net = build(config)
    except ConfigError as e:
        raise FormatError(f"stored config invalid: {e}") from e
    target = net.state_arrays()
    if set(target) != set(arrays):
        raise FormatError("array table does not match the stored config")
    for name, arr in arrays.items():
        if target[name].shape != arr.shape:
            raise FormatError(f"shape of {name!r} {arr.shape} != expected {target[name].shape}")
        target[name][...] = arr
    return net.eval()


def save_weights(net: DropNet, path) -> None:
    Path(path).write_bytes(dumps_weights(net))


def load_weights(path) -> DropNet:
    return loads_weights(Path(path).read_bytes())
