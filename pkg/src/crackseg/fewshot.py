"""Confidence-ranked rectification loop: score every soft mask, select the
lowest-confidence fraction, obtain corrected masks (from the simulated
expert or a human through the HTTP service), and fine-tune at a reduced
learning rate on just those corrections."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import metrics
from .backend import Tensor
from .r2aunet import Model, predict
from .training import Adam, TrainConfig, dice_loss
from . import backend


@dataclass
class RefineConfig:
    theta: float = 0.5                 # detection acceptance threshold
    selection_fraction: float = 0.05
    finetune_epochs: int = 5
    lr_divisor: float = 10.0
    expert_mode: str = "simulated"     # simulated | interactive

    def validate(self) -> None:
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ValueError(
                f"selection_fraction must be in (0, 1], got {self.selection_fraction}")
        if self.finetune_epochs < 1:
            raise ValueError(f"finetune_epochs must be >= 1, got {self.finetune_epochs}")
        if self.lr_divisor <= 0:
            raise ValueError(f"lr_divisor must be positive, got {self.lr_divisor}")
        if self.expert_mode not in ("simulated", "interactive"):
            raise ValueError(f"expert_mode must be simulated or interactive, "
                             f"got {self.expert_mode!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "RefineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown refine config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class ConfidenceRecord:
    image_id: str
    score: float
    detected_pixel_count: int


@dataclass
class RectifiedSample:
    image_id: str
    mask: np.ndarray                          # strictly binary correction
    author: str = "simulated"                 # simulated | human
    prediction: np.ndarray | None = None      # soft mask at selection time
    timestamp: float = field(default_factory=time.time, compare=False)


def confidence_score(mask, theta: float = 0.5, image_id: str = "") -> ConfidenceRecord:
    """Mean soft value over detected pixels (those strictly above theta).

    Images with no detections score 1.0: treating "nothing found" as full
    confidence keeps them out of the expert queue (the cost is that
    confident false negatives are never reviewed).
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty probability mask")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError(f"mask values must lie in [0, 1], "
                         f"got [{m.min():.4g}, {m.max():.4g}]")
    detected = m > theta
    count = int(np.count_nonzero(detected))
    score = float(m[detected].mean()) if count else 1.0
    return ConfidenceRecord(image_id, score, count)


def selection_size(n: int, fraction: float) -> int:
    """k = max(1, ceil(fraction * n)), guarded against float round-up
    (0.05 * 120 must select exactly 6, not ceil(6.000000000000001))."""
    return max(1, math.ceil(fraction * n - 1e-9))


def rank_and_select(records, fraction: float) -> list[str]:
    """Ids of the lowest-confidence fraction, ties broken by id."""
    records = list(records)
    if not records:
        raise ValueError("no confidence records to rank")
    k = selection_size(len(records), fraction)
    ordered = sorted(records, key=lambda r: (r.score, r.image_id))
    return [r.image_id for r in ordered[:k]]


def _by_id(dataset):
    if isinstance(dataset, dict):
        return dataset
    table = {}
    for sample in dataset:
        if sample.id in table:
            raise ValueError(f"duplicate sample id {sample.id!r}")
        table[sample.id] = sample
    return table


def simulated_expert(image_id: str, dataset, prediction=None) -> RectifiedSample:
    """Headless expert: returns the stored ground-truth mask verbatim."""
    sample = _by_id(dataset).get(image_id)
    if sample is None or sample.mask is None:
        raise ValueError(f"no ground-truth mask for image {image_id!r}")
    return RectifiedSample(image_id, sample.mask.copy(), "simulated", prediction)


def finetune_lr(last_lr: float, cfg: RefineConfig) -> float:
    return last_lr / cfg.lr_divisor


def fine_tune(model: Model, rectified, dataset, train_cfg: TrainConfig,
              refine_cfg: RefineConfig, last_lr: float | None = None) -> Model:
    """A few epochs over only the rectified samples.

    Learning rate is the last training rate divided by ``lr_divisor``
    (defaulting from ``train_cfg.lr0``); fresh optimizer state, no early
    stopping, no decay schedule. Only model weights and optimizer state
    change; the datasets are never touched.
    """
    train_cfg.validate()
    refine_cfg.validate()
    rectified = list(rectified)
    if not rectified:
        raise ValueError("no rectified samples to fine-tune on")
    table = _by_id(dataset)
    missing = [r.image_id for r in rectified if r.image_id not in table]
    if missing:
        raise ValueError(f"rectified ids not in dataset: {', '.join(missing)}")

    images = np.stack([table[r.image_id].image.transpose(2, 0, 1)
                       for r in rectified]).astype(np.float32)
    masks = np.stack([r.mask[None].astype(np.float32) for r in rectified])

    lr = finetune_lr(train_cfg.lr0 if last_lr is None else last_lr, refine_cfg)
    optimizer = Adam.from_config(model.params.values(), train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    n = images.shape[0]
    batch_size = min(train_cfg.batch_size, n)
    for _ in range(refine_cfg.finetune_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            model.zero_grads()
            pred = model.forward(Tensor(images[batch]), training=True)
            loss = dice_loss(pred, masks[batch], train_cfg.dice_eps)
            backend.backward(loss)
            optimizer.step(lr)
    return model


@dataclass
class RefineRow:
    image_id: str
    before_dice: float
    after_dice: float
    before_iou: float
    after_iou: float


@dataclass
class RefineReport:
    selected: list[ConfidenceRecord]
    rows: list[RefineRow]
    mean_before_dice: float
    mean_after_dice: float
    mean_before_iou: float
    mean_after_iou: float
    finetune_lr: float

    @property
    def selected_ids(self) -> list[str]:
        return [r.image_id for r in self.selected]

    @property
    def evaluated_ids(self) -> list[str]:
        return [r.image_id for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


def _per_image_metrics(predictions, samples):
    dices, ious = [], []
    for pred, sample in zip(predictions, samples):
        pred_bin = metrics.binarize(pred)
        gt = sample.mask.astype(bool)
        dices.append(metrics.dice(pred_bin, gt))
        ious.append(metrics.iou(pred_bin, gt))
    return dices, ious


def refine_loop(model: Model, eval_set, refine_cfg: RefineConfig,
                train_cfg: TrainConfig, last_lr: float | None = None):
    """One rectification round with the simulated expert.

    Predict everything, rank by confidence, hand the lowest fraction to the
    expert, fine-tune on the corrections, then re-evaluate on the
    evaluation set minus the selected images. Interactive rounds run
    through the rectification service instead.
    """
    refine_cfg.validate()
    if refine_cfg.expert_mode != "simulated":
        raise ValueError("refine_loop drives the simulated expert; "
                         "interactive rounds run through the rectification service")
    eval_set = list(eval_set)
    table = _by_id(eval_set)
    no_mask = [s.id for s in eval_set if s.mask is None]
    if no_mask:
        raise ValueError(f"evaluation samples without ground truth: {', '.join(no_mask)}")

    images = [s.image for s in eval_set]
    predictions = predict(model, images, batch_size=train_cfg.batch_size)
    pred_by_id = {s.id: p for s, p in zip(eval_set, predictions)}
    records = [confidence_score(pred_by_id[s.id], refine_cfg.theta, s.id)
               for s in eval_set]
    selected_ids = rank_and_select(records, refine_cfg.selection_fraction)
    selected_set = set(selected_ids)
    record_by_id = {r.image_id: r for r in records}

    remaining = [s for s in eval_set if s.id not in selected_set]
    if not remaining:
        raise ValueError("empty evaluation set: every image was selected for rectification")

    before_preds = [pred_by_id[s.id] for s in remaining]
    before_dice, before_iou = _per_image_metrics(before_preds, remaining)

    rectified = [simulated_expert(image_id, table, pred_by_id[image_id])
                 for image_id in selected_ids]
    lr_used = finetune_lr(train_cfg.lr0 if last_lr is None else last_lr, refine_cfg)
    model = fine_tune(model, rectified, table, train_cfg, refine_cfg, last_lr)

    after_preds = predict(model, [s.image for s in remaining],
                          batch_size=train_cfg.batch_size)
    after_dice, after_iou = _per_image_metrics(after_preds, remaining)

    rows = [RefineRow(s.id, bd, ad, bi, ai)
            for s, bd, ad, bi, ai in zip(remaining, before_dice, after_dice,
                                         before_iou, after_iou)]
    report = RefineReport(
        selected=[record_by_id[i] for i in selected_ids],
        rows=rows,
        mean_before_dice=float(np.mean(before_dice)),
        mean_after_dice=float(np.mean(after_dice)),
        mean_before_iou=float(np.mean(before_iou)),
        mean_after_iou=float(np.mean(after_iou)),
        finetune_lr=lr_used,
    )
    return model, report
