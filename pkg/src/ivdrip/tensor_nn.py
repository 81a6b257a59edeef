"""Small NHWC tensor kernels with forward and backward passes.

Tensors are plain numpy arrays shaped ``(batch, height, width, channels)``.
Parameters and activations are float32 by default; every kernel keeps the
dtype of its parameters so a float64 copy of a network can be used for
gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class CacheError(RuntimeError):
    """Backward called without a matching forward pass."""


def check_tensor4(x: np.ndarray, channels: int | None = None) -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"expected a 4-d (n, h, w, c) array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"all tensor dims must be >= 1, got {x.shape}")
    if channels is not None and x.shape[3] != channels:
        raise ShapeError(f"expected {channels} channels, got {x.shape[3]}")
    return x


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------

@dataclass
class ConvParams:
    weights: np.ndarray  # (k, k, in, out)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ShapeError(f"conv weights must be (k, k, in, out), got {self.weights.shape}")
        if self.kernel_size not in (1, 5):
            raise ParameterError(f"kernel size must be 1 or 5, got {self.kernel_size}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @classmethod
    def he_init(cls, k: int, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        std = np.sqrt(2.0 / (k * k * cin))
        w = (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)
        return cls(w, np.zeros(cout, dtype=dtype))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ParameterError("batch norm epsilon must be > 0")
        if not 0 < self.momentum < 1:
            raise ParameterError("batch norm momentum must be in (0, 1)")
        if np.any(self.running_var < 0):
            raise ParameterError("running variance must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


@dataclass
class GradientSet:
    """Parameter gradients keyed like the network's parameter dict, plus d(loss)/d(input)."""
    params: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


# --------------------------------------------------------------------------
# functional kernels
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d(x: np.ndarray, params: ConvParams, return_cols: bool = False):
    """Stride-1 convolution with zero "same" padding (spatial size preserved)."""
    check_tensor4(x, params.in_channels)
    if not np.isfinite(x).all():
        raise ParameterError("conv2d input contains non-finite values")
    n, h, w, _ = x.shape
    k = params.kernel_size
    cols = _im2col(x.astype(params.weights.dtype, copy=False), k)
    out = cols @ params.weights.reshape(-1, params.out_channels)
    out += params.bias
    out = out.reshape(n, h, w, params.out_channels)
    return (out, cols) if return_cols else out


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    if 0 <= slope <= 1:
        return np.maximum(x, x * x.dtype.type(slope))
    return np.where(x > 0, x, x * x.dtype.type(slope))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    # -> (n, h/2, w/2, c, 4) with the 2x2 window flattened row-major
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, h // 2, w // 2, c, 4)


def max_pool2(x: np.ndarray, return_indices: bool = False):
    check_tensor4(x)
    if not return_indices:
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"max_pool2 needs even spatial dims, got {x.shape[1]}x{x.shape[2]}")
        return np.maximum(np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
                          np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]))
    win = _pool_windows(x)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return (out, idx) if return_indices else out


def _channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance, accumulated in float64."""
    x2 = x.reshape(-1, x.shape[-1])
    m = x2.shape[0]
    mean = x2.sum(axis=0, dtype=np.float64) / m
    centered = x2 - mean.astype(x.dtype)
    var = np.einsum("ij,ij->j", centered, centered, dtype=np.float64) / m
    return mean, var


def batch_norm(x: np.ndarray, params: BatchNormParams, mode: str = "infer",
               return_cache: bool = False):
    check_tensor4(x, params.channels)
    if mode == "train":
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mean, var = _channel_stats(x)
        mom = params.momentum
        unbiased = var * m / (m - 1) if m > 1 else var
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
        if not return_cache:
            # one fused scale and shift per channel
            inv_std = 1.0 / np.sqrt(var + params.epsilon)
            scale = (params.gamma * inv_std).astype(x.dtype)
            out = x * scale
            out += (params.beta - mean * params.gamma * inv_std).astype(x.dtype)
            return out
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)) * inv_std
    out = xhat * params.gamma + params.beta
    return (out, (xhat, inv_std)) if return_cache else out


def dropout(x: np.ndarray, rate: float, mode: str = "infer",
            rng: np.random.Generator | None = None, return_mask: bool = False):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return (x, None) if return_mask else x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x * mask
    return (out, mask) if return_mask else out


# --------------------------------------------------------------------------
# layers (cache activations for backward)
# --------------------------------------------------------------------------

class Layer:
    name = "layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def _check_cache(self, dy: np.ndarray, out_shape):
        if out_shape is None:
            raise CacheError(f"{self.name}: backward without a cached forward pass")
        if dy.shape != out_shape:
            raise CacheError(f"{self.name}: upstream grad {dy.shape} != cached output {out_shape}")


class Conv2D(Layer):
    def __init__(self, p: ConvParams, name: str = "conv"):
        self.p = p
        self.name = name
        self._cols = None
        self._in_shape = None
        self._out_shape = None

    def params(self):
        return {f"{self.name}.weight": self.p.weights, f"{self.name}.bias": self.p.bias}

    def forward(self, x, train=False):
        if not train:
            return conv2d(x, self.p)
        y, cols = conv2d(x, self.p, return_cols=True)
        self._cols = cols
        self._in_shape, self._out_shape = x.shape, y.shape
        return y

    def backward(self, dy, input_grad: bool = True):
        self._check_cache(dy, self._out_shape)
        k, cout = self.p.kernel_size, self.p.out_channels
        n, h, w, cin = self._in_shape
        d2 = dy.reshape(-1, cout)
        dw = (self._cols.T @ d2).reshape(self.p.weights.shape)
        db = d2.sum(axis=0)
        grads = {f"{self.name}.weight": dw, f"{self.name}.bias": db}
        if not input_grad:
            return None, grads
        dcols = d2 @ self.p.weights.reshape(-1, cout).T
        if k == 1:
            dx = dcols.reshape(n, h, w, cin)
        else:
            p = k // 2
            dcols = dcols.reshape(n, h, w, k, k, cin)
            dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, p:p + h, p:p + w, :]
        return dx, grads


class BatchNorm(Layer):
    def __init__(self, p: BatchNormParams, name: str = "bn"):
        self.p = p
        self.name = name
        self._cache = None
        self._out_shape = None

    def params(self):
        return {f"{self.name}.gamma": self.p.gamma, f"{self.name}.beta": self.p.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.p.running_mean,
                f"{self.name}.running_var": self.p.running_var}

    def forward(self, x, train=False):
        if not train:
            return batch_norm(x, self.p, "infer")
        y, cache = batch_norm(x, self.p, "train", return_cache=True)
        self._cache, self._out_shape = cache, y.shape
        return y

    def backward(self, dy):
        self._check_cache(dy, self._out_shape)
        xhat, inv_std = self._cache
        m = dy.shape[0] * dy.shape[1] * dy.shape[2]
        axes = (0, 1, 2)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * self.p.gamma
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx.astype(dy.dtype, copy=False), {f"{self.name}.gamma": dgamma,
                                                 f"{self.name}.beta": dbeta}


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.1, name: str = "lrelu"):
        self.slope = slope
        self.name = name
        self._pos = None

    def forward(self, x, train=False):
        if train:
            self._pos = x > 0
        return leaky_relu(x, self.slope)

    def backward(self, dy):
        self._check_cache(dy, None if self._pos is None else self._pos.shape)
        return np.where(self._pos, dy, dy * dy.dtype.type(self.slope)), {}


class Sigmoid(Layer):
    def __init__(self, name: str = "sigmoid"):
        self.name = name
        self._y = None

    def forward(self, x, train=False):
        y = sigmoid(x)
        if train:
            self._y = y
        return y

    def backward(self, dy):
        self._check_cache(dy, None if self._y is None else self._y.shape)
        return dy * self._y * (1 - self._y), {}


class MaxPool2(Layer):
    def __init__(self, name: str = "pool"):
        self.name = name
        self._idx = None
        self._in_shape = None

    def forward(self, x, train=False):
        if not train:
            return max_pool2(x)
        y, idx = max_pool2(x, return_indices=True)
        self._idx, self._in_shape = idx, x.shape
        return y

    def backward(self, dy):
        self._check_cache(dy, None if self._idx is None else self._idx.shape)
        n, h, w, c = self._in_shape
        win = np.zeros(dy.shape + (4,), dtype=dy.dtype)
        np.put_along_axis(win, self._idx[..., None], dy[..., None], axis=-1)
        dx = win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return dx, {}


class Dropout(Layer):
    def __init__(self, rate: float, rng: np.random.Generator, name: str = "dropout"):
        if not 0 <= rate < 1:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.name = name
        self._mask = None
        self._shape = None

    def forward(self, x, train=False):
        y, mask = dropout(x, self.rate, "train" if train else "infer", self.rng, return_mask=True)
        if train:
            self._mask, self._shape = mask, y.shape
        return y

    def backward(self, dy):
        self._check_cache(dy, self._shape)
        return (dy if self._mask is None else dy * self._mask), {}


# --------------------------------------------------------------------------
# network-level passes and optimizer
# --------------------------------------------------------------------------

def forward(layers: Iterable[Layer], x: np.ndarray, train: bool = False) -> np.ndarray:
    for layer in layers:
        x = layer.forward(x, train)
    return x


def backward(layers: list[Layer], upstream: np.ndarray, input_grad: bool = True) -> GradientSet:
    """Backpropagate ``upstream`` (d loss / d output) through cached ``layers``.

    With ``input_grad=False`` a leading conv layer skips its input gradient,
    which training never needs.
    """
    grads = GradientSet()
    dy = upstream
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if i == 0 and not input_grad and isinstance(layer, Conv2D):
            dy, g = layer.backward(dy, input_grad=False)
        else:
            dy, g = layer.backward(dy)
        grads.params.update(g)
    grads.input = dy
    return grads


def sgd_step(params: Mapping[str, np.ndarray], grads: GradientSet | Mapping[str, np.ndarray],
             lr: float, momentum: float = 0.9,
             velocity: dict[str, np.ndarray] | None = None):
    """In-place SGD with momentum: ``v = momentum*v + g``; ``p -= lr*v``."""
    if lr < 0:
        raise ParameterError("learning rate must be >= 0")
    if not 0 <= momentum < 1:
        raise ParameterError("momentum must be in [0, 1)")
    g_map = grads.params if isinstance(grads, GradientSet) else grads
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        g = g_map.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} missing or mis-shaped")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= p.dtype.type(lr) * v
    return params, velocity
