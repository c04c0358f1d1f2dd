"""Segmentation losses (soft Dice + focal) and hard-label Dice metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class LabelError(ValueError):
    """Label ids outside ``[0, num_classes)``."""


@dataclass
class LossConfig:
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: tuple[float, ...] = ()  # empty means alpha_c = 1 for every class
    dice_smooth: float = 1e-5
    include_background: bool = False

    def __post_init__(self):
        self.focal_alpha = tuple(float(a) for a in self.focal_alpha)
        if self.lambda_dice < 0 or self.lambda_focal < 0:
            raise ValueError("loss weights must be non-negative")
        if self.focal_gamma < 0 or self.dice_smooth < 0 or any(a < 0 for a in self.focal_alpha):
            raise ValueError("focal gamma, alpha and dice smoothing must be non-negative")


def one_hot(labels: np.ndarray, num_classes: int, dtype=None) -> np.ndarray:
    """``(B, *spatial)`` ids to ``(B, C, *spatial)`` indicators."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]")
    eye = np.eye(num_classes, dtype=dtype or T.get_default_dtype())
    return np.moveaxis(eye[labels.astype(np.intp)], -1, 1)


def _check(logits: Tensor, labels: np.ndarray) -> None:
    if logits.ndim < 3 or logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are not aligned")


def dice_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """``1 - mean_c (2 sum(p*y) + s) / (sum(p) + sum(y) + s)`` on softmax probabilities.

    Sums run over the batch and all voxels, so each class gets one score per batch.
    """
    labels = np.asarray(labels)
    _check(logits, labels)
    num_classes = logits.shape[1]
    y = one_hot(labels, num_classes, logits.dtype)
    probs = T.softmax(logits, axis=1)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = T.sum(probs * y, axis=axes)
    denom = T.sum(probs, axis=axes) + y.sum(axis=axes)
    dice = (inter * 2.0 + cfg.dice_smooth) / (denom + cfg.dice_smooth)
    if not cfg.include_background:
        dice = dice[1:]
    return 1.0 - T.mean(dice)


def focal_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Voxel mean of ``-alpha_y (1 - p_t)^gamma log p_t``."""
    labels = np.asarray(labels)
    _check(logits, labels)
    num_classes = logits.shape[1]
    y = one_hot(labels, num_classes, logits.dtype)
    log_pt = T.sum(T.log_softmax(logits, axis=1) * y, axis=1)
    pt = T.exp(log_pt)
    weight = T.pow(1.0 - pt, cfg.focal_gamma)
    terms = weight * log_pt
    if cfg.focal_alpha:
        if len(cfg.focal_alpha) != num_classes:
            raise ValueError(f"focal_alpha has {len(cfg.focal_alpha)} entries for {num_classes} classes")
        alpha = np.asarray(cfg.focal_alpha, dtype=logits.dtype)[labels.astype(np.intp)]
        terms = terms * alpha
    return -T.mean(terms)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    y = one_hot(labels, logits.shape[1], logits.dtype)
    return -T.mean(T.sum(T.log_softmax(logits, axis=1) * y, axis=1))


@dataclass
class LossTerms:
    total: Tensor
    dice: Tensor
    focal: Tensor


def loss_terms(logits: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> LossTerms:
    d = dice_loss(logits, labels, cfg)
    f = focal_loss(logits, labels, cfg)
    return LossTerms(d * cfg.lambda_dice + f * cfg.lambda_focal, d, f)


def combined_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """``lambda_dice * dice + lambda_focal * focal``."""
    return loss_terms(logits, labels, cfg).total


@dataclass
class DiceScores:
    per_class: np.ndarray  # foreground classes 1..C-1
    mean: float
    whole_foreground: float


def binary_dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice_metric(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> DiceScores:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    per_class = np.array([binary_dice(pred == c, gt == c) for c in range(1, num_classes)])
    mean = float(per_class.mean()) if per_class.size else 1.0
    return DiceScores(per_class, mean, binary_dice(pred > 0, gt > 0))


def mean_scores(scores: Sequence[DiceScores]) -> DiceScores:
    per_class = np.mean([s.per_class for s in scores], axis=0)
    return DiceScores(per_class, float(np.mean([s.mean for s in scores])),
                      float(np.mean([s.whole_foreground for s in scores])))
