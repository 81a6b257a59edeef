"""Loss, train/validation split, SGD training loop and evaluation metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor_nn as tnn
from .dripcount import extract_observation
from .dropnet import DropNet
from .synthdrip import Dataset, label_cell

log = logging.getLogger(__name__)

CLAMP = 1e-7
LOSS_FORMS = ("bce", "categorical", "printed")


class TrainingError(RuntimeError):
    pass


def loss(Y: np.ndarray, Yhat: np.ndarray, form: str = "bce") -> float:
    """Grid loss summed over every cell (and over a leading batch axis, if any).

    ``bce``: -sum[Y log Yhat + (1-Y) log(1-Yhat)] -- the default.
    ``categorical``: -sum Y log Yhat.
    ``printed``: sum Y log Yhat, with no sign flip (nonpositive; ablation only).
    """
    if Y.shape != Yhat.shape:
        raise tnn.ShapeError(f"label {Y.shape} and prediction {Yhat.shape} differ")
    Y = Y.astype(np.float64)
    p = np.clip(Yhat.astype(np.float64), CLAMP, 1 - CLAMP)
    if form == "bce":
        return float(-np.sum(Y * np.log(p) + (1 - Y) * np.log(1 - p)))
    if form == "categorical":
        return float(-np.sum(Y * np.log(p)))
    if form == "printed":
        return float(np.sum(Y * np.log(p)))
    raise ValueError(f"unknown loss form {form!r}")


def loss_grad(Y: np.ndarray, Yhat: np.ndarray, form: str = "bce") -> np.ndarray:
    """d loss / d Yhat, zero where the clamp is active."""
    Y = Y.astype(np.float64)
    Yh = Yhat.astype(np.float64)
    p = np.clip(Yh, CLAMP, 1 - CLAMP)
    live = (Yh > CLAMP) & (Yh < 1 - CLAMP)
    if form == "bce":
        g = -Y / p + (1 - Y) / (1 - p)
    elif form == "categorical":
        g = -Y / p
    elif form == "printed":
        g = Y / p
    else:
        raise ValueError(f"unknown loss form {form!r}")
    return np.where(live, g, 0.0)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    split_ratio: float = 0.8
    seed: int = 0
    loss_form: str = "bce"

    def validate(self) -> None:
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {LOSS_FORMS}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_state_acc: float
    val_cell_acc: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_state_acc"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_state_acc)])


def split_indices(n: int, ratio: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 3]).permutation(n)
    k = int(round(n * ratio))
    return np.sort(perm[:k]), np.sort(perm[k:])


def to_input(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float32) * np.float32(1.0 / 255.0)


def predict(net: DropNet, data: Dataset, chunk: int = 64) -> np.ndarray:
    net.eval()
    outs = [net.forward(to_input(data.frames[i:i + chunk])) for i in range(0, len(data), chunk)]
    return np.concatenate(outs)


def evaluate(net, data: Dataset, grids: np.ndarray | None = None) -> dict:
    """State accuracy (decoded state == label) and cell accuracy (the grid's
    argmax cell is the label cell or one of its 8 neighbours).

    Pass precomputed ``grids`` to skip inference.
    """
    if grids is None:
        grids = predict(net, data)
    state_ok = cell_ok = 0
    for k in range(len(data)):
        obs = extract_observation(grids[k], 0.0)
        i, j = label_cell(float(data.x[k]), float(data.y[k]), data.W, data.S)
        state_ok += obs.s_hat == int(data.s[k])
        ci, cj = obs.cell
        cell_ok += abs(ci - i) <= 1 and abs(cj - j) <= 1
    n = len(data)
    return {"state_accuracy": state_ok / n, "cell_accuracy": cell_ok / n, "n": n}


def train(net: DropNet, data: Dataset, cfg: TrainConfig = TrainConfig(),
          val: Dataset | None = None, history_csv=None, on_epoch=None):
    """Train ``net`` in place; return (net holding its best-validation-loss weights, history).

    Without ``val`` the data is split ``split_ratio``/rest by ``cfg.seed``.
    """
    cfg.validate()
    if data is None or len(data) == 0:
        raise TrainingError("empty dataset")
    if val is None:
        tr_idx, va_idx = split_indices(len(data), cfg.split_ratio, cfg.seed)
        train_set, val = data.subset(tr_idx), data.subset(va_idx)
    else:
        train_set = data
    rng = np.random.default_rng([cfg.seed, 5])
    net.reseed(cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    params = net.parameters()
    hist = TrainHistory()
    best, best_loss = None, math.inf
    state = net.state_arrays()
    Y_all = train_set.labels()
    val_labels = val.labels()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[b:b + cfg.batch_size])
            x = to_input(train_set.frames[idx])
            Y = Y_all[idx]
            try:
                Yhat = net.forward(x)
                batch_loss = loss(Y, Yhat, cfg.loss_form)
            except tnn.ParameterError as e:  # conv rejects non-finite activations
                batch_loss, diag = math.nan, str(e)
            else:
                diag = f"loss {batch_loss}"
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} ({diag}); "
                                    f"learning rate {cfg.lr} too high?")
            total += batch_loss
            seen += len(idx)
            if cfg.loss_form == "bce":
                # sigmoid + BCE collapse to (Yhat - Y) on the logits
                grads = net.backward_from_logits((Yhat - Y) / len(idx), input_grad=False)
            else:
                grads = net.backward((loss_grad(Y, Yhat, cfg.loss_form) / len(idx)).astype(Yhat.dtype),
                                     input_grad=False)
            tnn.sgd_step(params, grads, cfg.lr, cfg.momentum, velocity)
        try:
            val_grids = predict(net, val)
        except tnn.ParameterError:
            val_grids = None
        val_loss = math.nan if val_grids is None else loss(val_labels, val_grids, cfg.loss_form) / len(val)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss after epoch {epoch}; "
                                f"learning rate {cfg.lr} too high?")
        m = evaluate(net, val, val_grids)
        rec = EpochRecord(epoch, total / seen, val_loss, m["state_accuracy"], m["cell_accuracy"],
                          time.perf_counter() - t0)
        hist.records.append(rec)
        log.info("epoch %d train %.4f val %.4f state %.4f cell %.4f (%.1fs)", epoch, rec.train_loss,
                 rec.val_loss, rec.val_state_acc, rec.val_cell_acc, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_loss:
            best_loss, best = val_loss, {k: v.copy() for k, v in state.items()}
            hist.best_epoch = epoch
    for k, v in best.items():
        state[k][...] = v
    if history_csv is not None:
        hist.write_csv(history_csv)
    return net.eval(), hist
