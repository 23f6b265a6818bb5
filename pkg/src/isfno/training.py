"""Multi-step training: relative-L2 losses, Adam, clipping, step schedule.

The per-sample loss is ||prediction - target||_2 / ||target||_2 with the
norm taken over every non-batch axis (time steps, space, channels); the
batch value is the sample mean. Multi-step models are scored on their n
outputs directly; the single-step baseline is composed n times on the tape
before scoring (recurrent loss).

Adam uses beta1=0.9, beta2=0.999 with decoupled weight decay, the epsilon
and learning-rate defaults of the training recipe, a step schedule halving
the rate every 100 epochs, and global-norm gradient clipping at 10.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import engine as eg
from .datasets import Dataset
from .models import Model, save_checkpoint

__all__ = [
    "AdamState",
    "DegenerateTargetError",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "clip_gradients",
    "loss_multistep",
    "loss_recurrent",
    "lr_at",
    "relative_l2",
    "train",
    "write_report_csv",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999


class DegenerateTargetError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.0025
    weight_decay: float = 1e-6
    adam_epsilon: float = 1e-6
    scheduler_step: int = 100
    scheduler_factor: float = 0.5
    clip_norm: float = 10.0
    horizon: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "adam_epsilon",
                     "scheduler_step", "scheduler_factor", "clip_norm", "horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class TrainReport:
    train_loss: list = dc_field(default_factory=list)
    val_loss: list = dc_field(default_factory=list)
    lr: list = dc_field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None
    best_epoch: int = -1


# ---------------------------------------------------------------------------
# losses


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_2 / ||b||_2 per sample over all non-batch axes, batch mean."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    axes = tuple(range(1, a.ndim))
    num = np.sqrt(np.sum((a - b) ** 2, axis=axes))
    den = np.sqrt(np.sum(b**2, axis=axes))
    if np.any(den == 0.0):
        raise DegenerateTargetError("target norm is zero")
    return float(np.mean(num / den))


def _sumsq_batched(t: eg.DiffTensor) -> eg.DiffTensor:
    axes = tuple(range(1, len(t.shape)))
    return eg.reduce_sum(eg.square(t), axes=axes)


def _relative_loss(preds: list[eg.DiffTensor], targets: np.ndarray) -> eg.DiffTensor:
    """Tape-side mean over batch of ||pred - target|| / ||target||."""
    batch = targets.shape[0]
    den = np.sqrt(np.sum(targets.reshape(batch, -1) ** 2, axis=1))
    if np.any(den == 0.0):
        raise DegenerateTargetError("target norm is zero")
    num_sq = None
    for j, pred in enumerate(preds):
        contrib = _sumsq_batched(eg.sub(pred, eg.constant(targets[:, j])))
        num_sq = contrib if num_sq is None else eg.add(num_sq, contrib)
    per_sample = eg.mul(eg.sqrt_elem(num_sq), eg.constant(1.0 / den))
    return eg.scale(eg.reduce_sum(per_sample), 1.0 / batch)


def loss_multistep(model: Model, inputs: np.ndarray, targets: np.ndarray,
                   params=None) -> eg.DiffTensor:
    """Score a multi-step model's n outputs against (G^1 v, ..., G^n v)."""
    n = model.spec.n_steps
    if targets.ndim < 2 or targets.shape[1] != n:
        raise ValueError(f"targets must have {n} steps, got shape {targets.shape}")
    preds = model.forward_multi(inputs, params=params)
    return _relative_loss(preds, targets)


def loss_recurrent(model: Model, inputs: np.ndarray, targets: np.ndarray,
                   params=None) -> eg.DiffTensor:
    """Compose the single-step baseline n times on the tape, then score."""
    n = targets.shape[1]
    preds = []
    state = eg.constant(inputs) if not isinstance(inputs, eg.DiffTensor) else inputs
    for _ in range(n):
        state = model.single_step(state, params=params)
        preds.append(state)
    return _relative_loss(preds, targets)


def model_loss(model: Model, inputs, targets, params=None) -> eg.DiffTensor:
    if model.spec.variant == "fno":
        return loss_recurrent(model, inputs, targets, params=params)
    return loss_multistep(model, inputs, targets, params=params)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float, epsilon: float) -> None:
    """One Adam update with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ArithmeticError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + epsilon)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * update


def clip_gradients(grads: dict, max_norm: float = 10.0) -> dict:
    """Rescale so the global L2 norm over all parameters is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        return {k: g * factor for k, g in grads.items()}
    return grads


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate * cfg.scheduler_factor ** (epoch // cfg.scheduler_step)


# ---------------------------------------------------------------------------
# the loop


def _evaluate(model: Model, inputs: np.ndarray, targets: np.ndarray,
              batch_size: int) -> float:
    total, count = 0.0, 0
    for start in range(0, inputs.shape[0], batch_size):
        xb = inputs[start: start + batch_size]
        yb = targets[start: start + batch_size]
        loss = model_loss(model, xb, yb)
        total += float(loss.data) * xb.shape[0]
        count += xb.shape[0]
    return total / max(count, 1)


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          checkpoint_path=None, log_every: int = 0) -> TrainReport:
    """Seeded mini-batch training with per-epoch validation.

    Keeps a checkpoint of the best validation model when a path is given.
    Deterministic for a fixed seed (single-threaded evaluation order).
    """
    x_train, y_train = dataset.pairs(cfg.horizon, "train")
    x_val, y_val = dataset.pairs(cfg.horizon, "validation")
    if x_train.shape[0] == 0:
        raise ValueError("dataset yields no training pairs")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(model.params)
    report = TrainReport()
    best = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(x_train.shape[0])
        epoch_loss, seen = 0.0, 0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start: start + cfg.batch_size]
            with eg.Tape() as tape:
                leaves = model.bind(tape)
                loss = model_loss(model, x_train[idx], y_train[idx], params=leaves)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(epoch, b)
                grads_by_node = tape.gradients(loss)
            grads = {name: grads_by_node[leaf.tape_id] for name, leaf in leaves.items()}
            grads = clip_gradients(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, lr, cfg.weight_decay, cfg.adam_epsilon)
            epoch_loss += float(loss.data) * idx.size
            seen += idx.size
        train_loss = epoch_loss / seen
        val_loss = (_evaluate(model, x_val, y_val, cfg.batch_size)
                    if x_val.shape[0] else np.nan)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.lr.append(lr)
        if x_val.shape[0] and val_loss < best:
            best = val_loss
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1:4d}  train {train_loss:.3e}  val {val_loss:.3e}  "
                  f"lr {lr:.2e}")

    model.params.update(best_params)
    report.wall_time = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report


def write_report_csv(report: TrainReport, path) -> None:
    """epoch, train_loss, val_loss, lr; one row per epoch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e, (tr, va, lr) in enumerate(zip(report.train_loss, report.val_loss,
                                             report.lr)):
            writer.writerow([e, repr(tr), repr(va), repr(lr)])
