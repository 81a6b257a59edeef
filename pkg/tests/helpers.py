"""Independent oracles shared by the test modules."""
from __future__ import annotations

import numpy as np

from ivdrip import synthdrip


def held_out_scene(seed: int, W: int = 128) -> synthdrip.SceneSpec:
    """Scene parameters from the training distribution, drawn from seeds no training sample uses."""
    rng = np.random.default_rng([seed, 77])
    return synthdrip.random_scene(rng, W, W, synthdrip.SceneRanges(), seed=10_000 + seed)


def naive_conv(x, w, b):
    """Direct loop convolution with zero "same" padding; w is (k, k, cin, cout)."""
    n, h, wd, _ = x.shape
    k = w.shape[0]
    p = k // 2
    out = np.zeros((n, h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            for di in range(k):
                for dj in range(k):
                    ii, jj = i + di - p, j + dj - p
                    if 0 <= ii < h and 0 <= jj < wd:
                        out[:, i, j, :] += x[:, ii, jj, :] @ w[di, dj]
    return out + b


def central_difference(f, arr: np.ndarray, idx, h: float = 1e-3) -> float:
    """d f / d arr[idx] by central differences, restoring the entry afterwards."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def reference_count(states, detected, m: int):
    """Independent debounce recount: collapse to detected frames, then find runs of length >= m.

    Returns the list of frame indices at which a stable 1 -> 0 change starts.
    """
    seq = [(k, s) for k, (s, d) in enumerate(zip(states, detected)) if d]
    runs = []  # (state, start frame, length) over the detected-only sequence
    for k, s in seq:
        if runs and runs[-1][0] == s:
            runs[-1][2] += 1
        else:
            runs.append([s, k, 1])
    events, stable = [], None
    for s, start, length in runs:
        if length >= m and s != stable:
            if stable == 1 and s == 0:
                events.append(start)
            stable = s
    return events
