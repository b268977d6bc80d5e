"""End-to-end training: dice loss on whole batches, bias-corrected Adam,
validation-plateau learning-rate decay, early stopping, and the seeded
80/20 split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import backend, metrics
from .backend import Tensor


class NonFiniteGradient(RuntimeError):
    """A parameter received a NaN/inf gradient; training cannot continue."""


@dataclass
class TrainConfig:
    epochs: int = 100
    early_stop_patience: int = 10
    batch_size: int = 8
    lr0: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 5
    decay_factor: float = 10.0
    dice_eps: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("epochs and patience values must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be > 1, got {self.decay_factor}")
        if self.dice_eps < 0:
            raise ValueError(f"dice_eps must be >= 0, got {self.dice_eps}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    val_iou: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    decay_epochs: list[int] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0            # 0 = the pre-training baseline
    best_val_loss: float = math.inf
    best_val_dice: float = math.nan
    best_val_iou: float = math.nan


def dice_loss(pred: Tensor, target, eps: float = 1.0) -> Tensor:
    """Soft dice loss over the whole batch jointly.

    loss = 1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps); the sums
    accumulate in float64 so identical masks give exactly zero.
    """
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=np.float32))
    if pred.shape != target.shape:
        raise backend.ContractViolation(
            f"dice_loss shape mismatch: {pred.shape} vs {target.shape}")
    intersection = backend.sum_all(backend.mul(pred, target))
    total = backend.sum_all(pred) + backend.sum_all(target)
    return 1.0 - (2.0 * intersection + eps) / (total + eps)


class Adam:
    """Bias-corrected Adam over named parameters, updating in place."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def step(self, lr: float) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {p.name!r}")
            m, v = self._m[p.name], self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


def split_80_20(dataset, seed: int):
    """Seeded shuffle, then first ceil(0.8 N) samples train, rest validation."""
    n = len(dataset)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = (4 * n + 4) // 5  # ceil(0.8 n) in exact integer arithmetic
    train = [dataset[i] for i in order[:n_train]]
    val = [dataset[i] for i in order[n_train:]]
    return train, val


def stack_samples(samples):
    """(N, C, H, W) image and (N, 1, H, W) mask stacks for training."""
    missing = [s.id for s in samples if s.mask is None]
    if missing:
        raise ValueError(f"samples without ground-truth masks: {', '.join(missing)}")
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    masks = np.stack([s.mask[None].astype(np.float32) for s in samples])
    return images, masks


def evaluate(model, images, masks, dice_eps: float, batch_size: int = 8):
    """Eval-mode (val_loss, mean_dice, mean_iou) over a stacked dataset.

    The dice loss is computed jointly over the full set (float64 sums);
    dice/IoU are per-image means of the binarized predictions.
    """
    inter = p_sum = t_sum = 0.0
    dices, ious = [], []
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        yb = masks[start:start + batch_size]
        pred = model.forward(Tensor(xb), training=False).data
        inter += float((pred.astype(np.float64) * yb).sum())
        p_sum += float(pred.sum(dtype=np.float64))
        t_sum += float(yb.sum(dtype=np.float64))
        for i in range(pred.shape[0]):
            pred_bin = metrics.binarize(pred[i, 0])
            gt = yb[i, 0] > 0.5
            dices.append(metrics.dice(pred_bin, gt))
            ious.append(metrics.iou(pred_bin, gt))
    loss = 1.0 - (2.0 * inter + dice_eps) / (p_sum + t_sum + dice_eps)
    return loss, float(np.mean(dices)), float(np.mean(ious))


# no-improvement tolerance: guards the patience counters against float jitter
IMPROVEMENT_TOL = 1e-6


def train(model, train_set, val_set, cfg: TrainConfig, *, val_loss_fn=None,
          verbose: bool = False):
    """Train with per-epoch seeded shuffles, plateau LR decay, early stop.

    Validation runs once before the first epoch to set the baseline, and
    after every epoch. No improvement for ``plateau_patience`` consecutive
    epochs divides the learning rate by ``decay_factor`` (that counter
    resets on decay); no improvement for ``early_stop_patience`` epochs
    stops training. Returns the weights of the best validation epoch.

    ``val_loss_fn(model) -> float`` replaces the validation pass when
    given (schedule tests); dice/IoU are then recorded as NaN.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if cfg.batch_size > len(train_set):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds training set size {len(train_set)}")

    images, masks = stack_samples(train_set)
    if val_loss_fn is None:
        val_images, val_masks = stack_samples(val_set)

    def run_validation():
        if val_loss_fn is not None:
            return float(val_loss_fn(model)), math.nan, math.nan
        return evaluate(model, val_images, val_masks, cfg.dice_eps, cfg.batch_size)

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam.from_config(model.params.values(), cfg)
    history = TrainHistory()
    lr = cfg.lr0
    n = images.shape[0]

    best_loss, best_dice, best_iou = run_validation()
    best_weights = model.copy_weights()
    history.best_val_loss = best_loss
    history.best_val_dice = best_dice
    history.best_val_iou = best_iou
    plateau = early = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_total = 0.0
        aborted = None
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grads()
            pred = model.forward(Tensor(images[batch]), training=True)
            loss = dice_loss(pred, masks[batch], cfg.dice_eps)
            value = loss.item()
            if not math.isfinite(value):
                aborted = f"non-finite training loss in epoch {epoch}"
                break
            backend.backward(loss)
            try:
                optimizer.step(lr)
            except NonFiniteGradient as err:
                aborted = f"{err} (epoch {epoch})"
                break
            loss_total += value * len(batch)
        if aborted:
            history.stop_reason = f"aborted: {aborted}"
            break

        train_loss = loss_total / n
        val_loss, val_dice, val_iou = run_validation()
        history.records.append(
            EpochRecord(epoch, train_loss, val_loss, val_dice, val_iou, lr))
        if verbose:
            print(f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  "
                  f"dice {val_dice:.4f}  lr {lr:g}")

        if val_loss < best_loss - IMPROVEMENT_TOL:
            best_loss = val_loss
            best_weights = model.copy_weights()
            history.best_epoch = epoch
            history.best_val_loss = best_loss
            history.best_val_dice = val_dice
            history.best_val_iou = val_iou
            plateau = early = 0
        else:
            plateau += 1
            early += 1
            if plateau >= cfg.plateau_patience:
                lr /= cfg.decay_factor
                plateau = 0
                history.decay_epochs.append(epoch)
            if early >= cfg.early_stop_patience:
                history.stop_reason = "early_stop"
                break
    if not history.stop_reason:
        history.stop_reason = "max_epochs"

    model.set_weights(best_weights)
    return model, history


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_dice", "val_iou", "lr"])
        for r in history.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                             repr(r.val_dice), repr(r.val_iou), repr(r.lr)])
