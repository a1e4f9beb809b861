"""Weighted dice similarity, its loss, and confusion-based metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .engine import ShapeError, Tensor

DEFAULT_BETA = 6.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def weighted_dice_similarity(p0, g0, beta: float = DEFAULT_BETA, smooth: float = 0.0) -> Tensor:
    """``sum(p0 g0) / (sum(p0 g0) + beta/2 * (sum(p0 g1) + sum(p1 g0)))``.

    ``p0`` is the foreground probability, ``g0`` the binary foreground label,
    ``p1 = 1 - p0`` and ``g1 = 1 - g0``. Empty prediction against empty truth
    scores 1. ``smooth`` is added to numerator and denominator.
    """
    p0 = torch.as_tensor(p0)
    g0 = torch.as_tensor(g0, dtype=p0.dtype if p0.is_floating_point() else torch.float64)
    if not p0.is_floating_point():
        p0 = p0.to(g0.dtype)
    if p0.shape != g0.shape:
        raise ShapeError(f"prediction {tuple(p0.shape)} and truth {tuple(g0.shape)} differ")
    inter = (p0 * g0).sum()
    false_pos = (p0 * (1 - g0)).sum()
    false_neg = ((1 - p0) * g0).sum()
    num = inter + smooth
    den = inter + 0.5 * beta * (false_pos + false_neg) + smooth
    if smooth == 0 and den.detach() == 0:
        return torch.ones((), dtype=p0.dtype) + 0 * p0.sum()
    return num / den


def weighted_dice_loss(p0, g0, beta: float = DEFAULT_BETA, smooth: float = 0.0) -> Tensor:
    return 1 - weighted_dice_similarity(p0, g0, beta, smooth)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction extents {pred.shape} and truth extents {truth.shape} differ")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics(c: ConfusionCounts) -> dict[str, float | None]:
    """Precision, sensitivity and dice; ``None`` marks an undefined (0/0) value."""
    return {
        "precision": _ratio(c.tp, c.tp + c.fp),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }


def metrics_row(case_id: str, c: ConfusionCounts) -> str:
    return json.dumps({"case_id": case_id, **metrics(c)})
