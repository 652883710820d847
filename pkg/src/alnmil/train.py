"""SGD with L2 weight decay and an L1 penalty, cosine warm restarts, per-bag updates."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .evaluate import mean_auroc, predict_slides
from .milnet import MilModel, backward, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay_l2: float = 1e-3
    l1_weight: float = 1e-6
    epochs: int = 200
    T_0: int = 10
    T_mult: int = 2
    eta_min: float = 0.0
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.base_lr, self.weight_decay_l2, self.l1_weight, self.eta_min, self.momentum) < 0:
            raise ValueError("rates must be non-negative")
        if self.T_0 < 1 or self.T_mult < 1:
            raise ValueError("T_0 and T_mult must be >= 1")
        if self.eta_min > self.base_lr:
            raise ValueError("eta_min must not exceed base_lr")


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best_val_auroc: float | None = None
    best_epoch: int = -1
    rng: np.random.Generator | None = None
    velocity: dict = field(default_factory=dict)


def cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits")
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    dlogits = np.exp(shifted - log_z)
    dlogits[label] -= 1.0
    return float(loss), dlogits


def cosine_warm_restarts(t: float, cfg: TrainConfig) -> float:
    """Learning rate at epoch ``t``.

    Cycle i anneals over T_i = T_0 * T_mult**i epochs and includes both end
    points, so lr(start) = base_lr and lr(start + T_i) = eta_min; the next
    cycle starts one epoch later at base_lr.
    """
    if t < 0:
        raise ValueError("epoch must be non-negative")
    start, period = 0, cfg.T_0
    while t > start + period:
        if t < start + period + 1:
            return cfg.eta_min
        start += period + 1
        period *= cfg.T_mult
    t_cur = t - start
    return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * t_cur / period))


def sgd_step(model: MilModel, lr: float, cfg: TrainConfig, state: TrainState | None = None) -> MilModel:
    """theta <- theta - lr * (g + l2 * theta + l1 * sign(theta)), in place."""
    updates = {}
    for name, theta in model.params.items():
        step = model.grads[name] + cfg.weight_decay_l2 * theta + cfg.l1_weight * np.sign(theta)
        if cfg.momentum and state is not None:
            v = state.velocity.get(name)
            step = step if v is None else cfg.momentum * v + step
            state.velocity[name] = step
        new = theta - lr * step
        if not np.all(np.isfinite(new)):
            bad = int(np.count_nonzero(~np.isfinite(new)))
            raise DivergenceError(
                f"non-finite update in {name} ({bad} entries, lr={lr:g}, |grad|max={np.abs(model.grads[name]).max():g})")
        updates[name] = new
    for name, new in updates.items():
        model.params[name][...] = new
    return model


def train_loop(model: MilModel, train_bags, val_bags, cfg: TrainConfig):
    """Train with per-bag SGD; keep the parameters with the best validation AUROC.

    Returns (best model, log) where log rows are dicts with keys
    epoch, lr, train_loss, val_auroc. Ties in validation AUROC go to the
    later epoch.
    """
    train_bags = list(train_bags)
    val_bags = list(val_bags)
    if cfg.epochs > 0 and not train_bags:
        raise ValueError("training cohort is empty")
    state = TrainState(rng=np.random.default_rng(cfg.seed))
    best = model.copy()
    history = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.lr = lr = cosine_warm_restarts(epoch, cfg)
        order = state.rng.permutation(len(train_bags))
        losses = []
        for i in order:
            bag = train_bags[i]
            fwd = forward(model, bag.instances, bag.clinical)
            loss, dlogits = cross_entropy(fwd.logits, bag.label)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            model.zero_grad()
            backward(model, fwd, dlogits)
            sgd_step(model, lr, cfg, state)
            losses.append(loss)
        val_auroc = mean_auroc(predict_slides(model, val_bags)) if val_bags else None
        history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_auroc": val_auroc})
        if val_auroc is None:
            if state.best_val_auroc is None:
                best = model.copy()
                state.best_epoch = epoch
        elif state.best_val_auroc is None or val_auroc >= state.best_val_auroc:
            state.best_val_auroc = val_auroc
            state.best_epoch = epoch
            best = model.copy()
        log.debug("epoch %d lr %.3g loss %.4f val_auroc %s", epoch, lr, history[-1]["train_loss"], val_auroc)
    if cfg.epochs == 0:
        best = model
    else:
        log.info("best validation AUROC %s at epoch %d", state.best_val_auroc, state.best_epoch)
    return best, history


def write_log(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_loss", "val_auroc"])
        for row in history:
            va = "NA" if row["val_auroc"] is None else f"{row['val_auroc']:.8f}"
            writer.writerow([row["epoch"], f"{row['lr']:.8f}", f"{row['train_loss']:.8f}", va])
