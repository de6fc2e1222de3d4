"""Training loop: BCE + soft-Dice loss, AdamW, cosine schedule, per-epoch CSV."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import tensor as T
from ..segnet import NetworkConfig, PatchMoENet, save_checkpoint
from . import data as D
from .metrics import MetricReport, evaluate
from .optim import AdamW, cosine_lr

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "loss", "dsc", "iou", "mae", "lr")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 60
    batch_size: int = 8
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    cycle: int = 50
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dsc: float
    iou: float
    mae: float
    lr: float

    def row(self) -> tuple:
        return (self.epoch, f"{self.loss:.10g}", f"{self.dsc:.10g}", f"{self.iou:.10g}",
                f"{self.mae:.10g}", f"{self.lr:.10g}")


@dataclass
class TrainResult:
    model: PatchMoENet
    history: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


def segmentation_loss(logits: T.Tensor, masks: np.ndarray) -> T.Tensor:
    """Mean of binary cross-entropy and soft-Dice loss."""
    return T.scale(T.add(T.bce_with_logits(logits, masks), T.soft_dice_loss(logits, masks)), 0.5)


def predict_batches(model: PatchMoENet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = [model.predict(T.Tensor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def evaluate_model(model: PatchMoENet, samples, batch_size: int = 16) -> MetricReport:
    images, masks = D.stack(samples)
    return evaluate(predict_batches(model, images, batch_size), masks)


def train_step(model: PatchMoENet, opt: AdamW, images: np.ndarray, masks: np.ndarray) -> float:
    model.train()
    opt.zero_grad()
    loss = segmentation_loss(model(T.Tensor(images)), masks)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergence(f"loss became {value} at optimizer step {opt.step_count + 1}")
    T.backward(loss)
    opt.step()
    return value


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for rec in history:
            w.writerow(rec.row())


def train(config: NetworkConfig, train_set, val_set=None, settings: Optional[TrainSettings] = None,
          out_dir=None, tag: str = "run") -> TrainResult:
    """Train a fresh model; deterministic given ``settings.seed``.

    Validation metrics (or training-set metrics when ``val_set`` is None) are
    recorded after each epoch.  With ``out_dir`` the checkpoint and
    ``<tag>.csv`` are written there.
    """
    settings = settings or TrainSettings()
    if not train_set:
        raise ValueError("training set is empty")
    model = PatchMoENet(config, seed=settings.seed)
    opt = AdamW(model.parameters(), lr=settings.lr_max, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)
    dtype = T.get_dtype()
    images, masks = D.stack(train_set)
    images, masks = images.astype(dtype), masks.astype(dtype)
    eval_set = val_set if val_set else train_set
    result = TrainResult(model)
    start = time.perf_counter()
    for epoch in range(settings.epochs):
        lr = cosine_lr(epoch, settings.lr_max, settings.lr_min, settings.cycle)
        opt.lr = lr
        order = rng.permutation(len(images))
        losses = []
        for i in range(0, len(order), settings.batch_size):
            idx = order[i:i + settings.batch_size]
            losses.append(train_step(model, opt, images[idx], masks[idx]))
        report = evaluate_model(model, eval_set)
        rec = EpochRecord(epoch, float(np.mean(losses)), report.dsc, report.iou, report.mae, lr)
        result.history.append(rec)
        log.info("%s epoch %d loss %.4f dsc %.4f lr %.2e", tag, epoch, rec.loss, rec.dsc, lr)
    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / f"{tag}.csv", result.history)
        save_checkpoint(out / f"{tag}.pmss", model)
    return result


def overfit_single(config: NetworkConfig, sample, steps: int = 200, lr: float = 1e-3, seed: int = 0) -> float:
    """Fit one sample for ``steps`` optimizer steps; return its Dice afterwards."""
    model = PatchMoENet(config, seed=seed)
    opt = AdamW(model.parameters(), lr=lr)
    dtype = T.get_dtype()
    img = sample.image[None].astype(dtype)
    msk = sample.mask[None].astype(dtype)
    for _ in range(steps):
        train_step(model, opt, img, msk)
    return evaluate(predict_batches(model, img), msk).dsc
