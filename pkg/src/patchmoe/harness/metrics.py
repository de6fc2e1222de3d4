"""Segmentation metrics: Dice, IoU and mean absolute error.

Dice and IoU binarize the prediction at ``threshold`` (``pred >= threshold``).
MAE uses the raw probabilities.  When prediction and ground truth are both
empty, Dice = IoU = 1; when exactly one is empty both are 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ContractError, DimensionError


@dataclass
class MetricReport:
    dsc: float
    iou: float
    mae: float
    threshold: float = 0.5


def _prepare(pred, mask):
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != mask.shape:
        raise DimensionError(f"prediction {pred.shape} and mask {mask.shape} differ in shape")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be binary")
    return pred, mask.astype(bool)


def _overlap(pred, mask, threshold):
    pred, gt = _prepare(pred, mask)
    p = pred >= threshold
    inter = int(np.count_nonzero(p & gt))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(gt))


def dice(pred, mask, threshold: float = 0.5) -> float:
    inter, np_, ng = _overlap(pred, mask, threshold)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def iou(pred, mask, threshold: float = 0.5) -> float:
    inter, np_, ng = _overlap(pred, mask, threshold)
    union = np_ + ng - inter
    if union == 0:
        return 1.0
    return inter / union


def mae(pred, mask) -> float:
    pred, gt = _prepare(pred, mask)
    return float(np.mean(np.abs(pred - gt)))


def evaluate(preds, masks, threshold: float = 0.5) -> MetricReport:
    """Per-image metrics averaged over the leading (batch) axis."""
    rows = [(dice(p, m, threshold), iou(p, m, threshold), mae(p, m)) for p, m in zip(preds, masks)]
    d, i, a = np.mean(rows, axis=0)
    return MetricReport(float(d), float(i), float(a), threshold)
