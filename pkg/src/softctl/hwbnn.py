"""Hysteresis-aware whole-body network: (pressures, direction signs) -> key points.

Training uses a range-weighted MSE so that the nearly fixed base coordinates
and the far-travelling tip coordinates contribute on a comparable footing.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .mlp import Adam, MlpModel, Sgd, init_mlp, mlp_from_arrays, mlp_header, read_arrays, write_arrays, write_sidecar

log = logging.getLogger(__name__)

INPUT_MODES = ("6d", "3d")


class DegenerateRangeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RangeWeights:
    w: np.ndarray
    delta_y: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 300
    eval_every: int = 10
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"
    init: str = "uniform-fanin"
    lr_decay: float = 1.0  # multiplicative lr factor applied at every evaluation

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.max_epochs > 0
                and self.eval_every > 0 and self.patience > 0):
            raise ValueError("rates and counts must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def compute_range_weights(train_targets) -> RangeWeights:
    y = np.asarray(train_targets, dtype=float)
    if y.ndim != 2 or len(y) < 2:
        raise ValueError("need at least 2 training samples")
    delta = y.max(axis=0) - y.min(axis=0)
    total = delta.sum()
    if not total > 0:
        raise DegenerateRangeError("every output dimension is constant over the training set")
    w = 1.0 + y.shape[1] * delta / total
    return RangeWeights(w, delta)


def weighted_mse(y, y_hat, weights) -> float:
    """Mean over samples of (1/D) sum_i w_i (y_i - yhat_i)^2."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    w = np.asarray(weights, dtype=float)
    if y.shape != y_hat.shape or y.shape[-1] != w.shape[-1]:
        raise ValueError(f"shape mismatch: {y.shape}, {y_hat.shape}, {w.shape}")
    r = (y - y_hat) ** 2 * w
    return float(r.mean())


def mse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape}, {y_hat.shape}")
    return float(((y - y_hat) ** 2).mean())


@dataclass
class BodyModel:
    """MLP plus input standardization; direction columns pass through unchanged."""

    net: MlpModel
    input_mode: str = "6d"
    p_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.net.n_in != (6 if self.input_mode == "6d" else 3):
            raise ValueError("network input size does not match input mode")

    @property
    def n_keys(self) -> int:
        return self.net.n_out // 3

    def features(self, p, d=None) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x = (p - self.p_mean) / self.p_std
        if self.input_mode == "6d":
            if d is None:
                raise ValueError("6d model needs direction signs")
            x = np.hstack([x, np.atleast_2d(np.asarray(d, dtype=float))])
        return x

    def predict(self, p, d=None) -> np.ndarray:
        """Flattened key points (mm); one row per input row, or a vector for a single input."""
        single = np.ndim(p) == 1
        y = self.net.forward(self.features(p, d))
        return y[0] if single else y

    def predict_keys(self, p, d=None) -> np.ndarray:
        return self.predict(p, d).reshape(-1, 3)

    def dataset_inputs(self, ds: Dataset) -> np.ndarray:
        return self.features(ds.p, ds.d if self.input_mode == "6d" else None)

    def copy(self) -> "BodyModel":
        return BodyModel(self.net.copy(), self.input_mode, self.p_mean.copy(), self.p_std.copy())


def make_body_model(train: Dataset, hidden=(128, 128, 128, 128), input_mode="6d", seed=0,
                    activation="relu") -> BodyModel:
    n_in = 6 if input_mode == "6d" else 3
    net = init_mlp([n_in, *hidden, train.y.shape[1]], activation, np.random.default_rng(seed))
    std = train.p.std(axis=0)
    std[std == 0] = 1.0
    return BodyModel(net, input_mode, train.p.mean(axis=0), std)


def backward(net: MlpModel, x, y, weights):
    """Loss and exact gradients of the batch-mean weighted MSE w.r.t. ``net.params()``."""
    y_hat, cache = net.forward_cache(x)
    diff = y_hat - y
    n, d = y.shape
    loss = float((diff * diff * weights).mean())
    grads = net.backward(cache, (2.0 / (n * d)) * weights * diff)
    return loss, grads


class EarlyStopping:
    """Stop once ``patience`` consecutive evaluations fail to improve on the best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_index = -1
        self.bad = 0
        self.count = 0

    def update(self, loss: float) -> bool:
        """Record one evaluation; True means stop."""
        improved = loss < self.best
        if improved:
            self.best, self.best_index, self.bad = loss, self.count, 0
        else:
            self.bad += 1
        self.count += 1
        return self.bad >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.best_index == self.count - 1


def train(model: BodyModel, train_set: Dataset, val_set: Dataset, cfg: TrainConfig = TrainConfig(),
          weights: RangeWeights | None = None):
    """Mini-batch training with periodic validation and early stopping.

    Returns ``(best_model, history)``; the model is the best-validation
    checkpoint, not the last iterate. ``history`` is a list of per-evaluation
    dicts.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    weights = weights or compute_range_weights(train_set.y)
    w = weights.w
    model = model.copy()
    net = model.net
    x_tr, y_tr = model.dataset_inputs(train_set), train_set.y
    x_va, y_va = model.dataset_inputs(val_set), val_set.y
    rng = np.random.default_rng(cfg.seed)
    if cfg.optimizer == "adam":
        opt = Adam(net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        opt = Sgd(net.params(), cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    best = model.copy()
    history = []
    n = len(x_tr)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward(net, x_tr[idx], y_tr[idx], w)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.step(grads)
            total += loss * len(idx)
        train_loss = total / n
        if not np.isfinite(train_loss):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}")
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            val_loss = weighted_mse(y_va, net.forward(x_va), w)
            if not np.isfinite(val_loss):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            stop = stopper.update(val_loss)
            if stopper.improved_last:
                best = model.copy()
            history.append({"epoch": epoch, "train_wmse": train_loss, "val_wmse": val_loss,
                            "best_val_wmse": stopper.best, "lr": opt.lr})
            log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
            if stop:
                break
            opt.lr *= cfg.lr_decay
    return best, history


def evaluate(model: BodyModel, ds: Dataset, weights: RangeWeights) -> dict:
    y_hat = model.predict(ds.p, ds.d)
    return {"wmse": weighted_mse(ds.y, y_hat, weights.w), "mse": mse(ds.y, y_hat)}


def arch_name(hidden) -> str:
    return "x".join(str(h) for h in hidden)


DEFAULT_ARCHITECTURES = [(w,) * depth for depth in (3, 4) for w in (64, 128, 256)]


def ablation_compare(splits: dict, architectures=DEFAULT_ARCHITECTURES, cfg: TrainConfig = TrainConfig(),
                     modes=INPUT_MODES):
    """Train each architecture with 6D and 3D inputs; report test weighted and plain MSE."""
    tr, va, te = splits["train"], splits["val"], splits["test"]
    if not tr.y.shape[1] == va.y.shape[1] == te.y.shape[1]:
        raise ValueError("splits do not share a target layout")
    weights = compute_range_weights(tr.y)
    rows, models = [], {}
    for hidden in architectures:
        for mode in modes:
            model = make_body_model(tr, hidden, mode, seed=cfg.seed)
            best, hist = train(model, tr, va, cfg, weights)
            metrics = evaluate(best, te, weights)
            rows.append({"architecture": arch_name(hidden), "input_mode": mode,
                         "test_wmse": metrics["wmse"], "test_mse": metrics["mse"],
                         "epochs": hist[-1]["epoch"]})
            models[(arch_name(hidden), mode)] = best
            log.info("%s %s test mse %.5g", arch_name(hidden), mode, metrics["mse"])
    return rows, models


def best_by_mode(rows, key="test_mse") -> dict:
    out = {}
    for r in rows:
        if r["input_mode"] not in out or r[key] < out[r["input_mode"]][key]:
            out[r["input_mode"]] = r
    return out


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["architecture", "input_mode", "test_wmse", "test_mse"])
        for r in rows:
            wr.writerow([r["architecture"], r["input_mode"], repr(r["test_wmse"]), repr(r["test_mse"])])


def save_model(model: BodyModel, path, meta: dict | None = None) -> None:
    header = mlp_header(model.net) | {"kind": "hwbnn", "input_mode": model.input_mode}
    arrays = model.net.params() + [model.p_mean, model.p_std]
    write_arrays(path, header, arrays)
    sidecar = {"kind": "hwbnn", "input_mode": model.input_mode, "layer_sizes": model.net.layer_sizes,
               "activation": model.net.activation, "p_mean": model.p_mean, "p_std": model.p_std}
    sidecar.update(meta or {})
    write_sidecar(Path(str(path) + ".json"), sidecar)


def load_model(path) -> BodyModel:
    header, arrays = read_arrays(path)
    if header.get("kind") != "hwbnn":
        raise ValueError(f"{path}: not a body-model checkpoint")
    net = mlp_from_arrays(header, arrays[:-2])
    return BodyModel(net, header["input_mode"], arrays[-2], arrays[-1])


def gradient_check(net: MlpModel, x, y, weights, n_params: int = 200, step: float = 1e-5, rng=None):
    """Central finite differences on randomly chosen parameters.

    Returns ``(analytic, numeric, valid)``. ``valid`` is False where the +/- step
    flips a ReLU, so the loss is not differentiable across the probe.
    """
    rng = np.random.default_rng(rng)
    _, grads = backward(net, x, y, weights)
    params = net.params()
    sizes = np.array([p.size for p in params])
    chosen = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric, valid = [], [], []

    def pattern():
        _, cache = net.forward_cache(x)
        return [z > 0 for z, _ in cache[1:-1]]

    for flat in chosen:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        arr = params[k].reshape(-1)
        i = flat - offsets[k]
        old = arr[i]
        arr[i] = old + step
        lp, pat_p = weighted_mse(y, net.forward(x), weights), pattern()
        arr[i] = old - step
        lm, pat_m = weighted_mse(y, net.forward(x), weights), pattern()
        arr[i] = old
        analytic.append(grads[k].reshape(-1)[i])
        numeric.append((lp - lm) / (2 * step))
        valid.append(all(np.array_equal(a, b) for a, b in zip(pat_p, pat_m)))
    return np.array(analytic), np.array(numeric), np.array(valid)


def relative_error(a, b, floor: float = 1e-8):
    """|a - b| / max(|a|, |b|), with both-tiny pairs counted as exact."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale < floor, 0.0, np.abs(a - b) / np.maximum(scale, floor))
