"""MAE regression with decoupled-weight-decay Adam and validation early stopping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, OptimizerError, ShapeError
from .numerics import Rng
from .pilotnet import ModelParams, NetworkConfig, PilotNet, init_params, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "epsilon", "batch_size", "max_epochs", "patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not self.beta1 < 1 or not self.beta2 < 1:
            raise ConfigError("betas must be below 1")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class Dataset:
    """Preprocessed inputs (uint8 codes or floats in [0, 1]) and steering targets in degrees."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if len(self.inputs) != len(self.targets):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self):
        return len(self.targets)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        x = self.inputs[idx]
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / np.float32(255.0)
        return x, self.targets[idx]


def mae_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ShapeError("empty batch")
    return float(np.mean(np.abs(pred - target)))


def mae_grad(pred, target) -> np.ndarray:
    """Subgradient of the mean absolute error; zero where pred == target."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sign(diff) / diff.size


def adamw_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """One AdamW update, in place. Returns ``(params, state)``.

    The Adam step uses bias-corrected moments; the decay ``lr * weight_decay * w``
    is applied to the pre-update weights and bypasses the moment estimates.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {name} at step {t}")
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient {g.shape} does not match {name} {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(w.shape, np.float64)
            state.v[name] = np.zeros(w.shape, np.float64)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        w64 = w.astype(np.float64)
        w64 *= 1.0 - cfg.lr * cfg.weight_decay
        w64 -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        params[name] = w64.astype(w.dtype)
    return params, state


class EarlyStopping:
    """Stops once ``patience`` epochs pass without a strictly lower validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch (1-based). Returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def evaluate_mae(params: ModelParams, data: Dataset, batch_size=64) -> float:
    preds = []
    for i in range(0, len(data), batch_size):
        x, _ = data.batch(slice(i, i + batch_size))
        preds.append(predict(params, x, batch_size))
    return mae_loss(np.concatenate(preds), data.targets)


def train(train_set: Dataset, val_set: Dataset, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          params: ModelParams | None = None):
    """Returns ``(best_params, history)``; history rows are ``(epoch, train_mae, val_mae)``."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    if len(train_set) < 2:
        raise ConfigError("batch norm needs at least two training samples")
    rng = Rng(train_cfg.seed)
    init_rng, order_rng = rng.spawn(2)
    if params is None:
        params = init_params(net_cfg, init_rng)
    net = PilotNet(params)
    state = OptimizerState()
    stopper = EarlyStopping(train_cfg.patience)
    best = params.copy()
    history = []
    n = len(train_set)
    bs = train_cfg.batch_size
    steps = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = order_rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            x, y = train_set.batch(idx)
            pred = net.forward(x, "train").astype(np.float64).ravel()
            losses.append(mae_loss(pred, y))
            weights.append(len(idx))
            grads = net.backward(mae_grad(pred, y))
            adamw_step(params.tensors, grads, state, train_cfg)
            steps += 1
            if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
                break
        train_mae = float(np.average(losses, weights=weights))
        val_mae = evaluate_mae(params, val_set)
        history.append((epoch, train_mae, val_mae))
        log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, train_mae, val_mae)
        stop = stopper.update(epoch, val_mae)
        if stopper.best_epoch == epoch:
            best = params.copy()
        if stop or (train_cfg.max_steps is not None and steps >= train_cfg.max_steps):
            break
    return best, history


def write_history(history, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mae", "val_mae"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
