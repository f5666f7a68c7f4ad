"""Soft Dice loss on sigmoid probabilities."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F

DICE_EPS = 1e-5


def soft_dice_loss(probs: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_{b,j} (2 sum_i G Y + eps) / (sum_i G^2 + sum_i Y^2 + eps)``.

    ``probs`` and ``target`` are ``(B, J, H, W, D)``; sums run over voxels of
    each sample and class, and the per-class terms are averaged over classes
    and the batch. With ``eps=0`` this is the plain overlap ratio, and a class
    absent from both prediction and target contributes no loss when
    ``eps > 0``.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    g = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=probs.dtype)
    if g.shape != probs.shape:
        raise ValueError(f"prediction shape {probs.shape} != target shape {g.shape}")
    if probs.ndim < 3:
        raise ValueError(f"expected (B, J, ...) inputs, got shape {probs.shape}")
    axes = tuple(range(2, probs.ndim))
    gt = Tensor(g)
    inter = F.sum(F.mul(probs, gt), axis=axes)
    pred_sq = F.sum(F.mul(probs, probs), axis=axes)
    gt_sq = Tensor((g * g).sum(axis=axes))
    num = F.add(F.scale(inter, 2.0), eps)
    den = F.add(F.add(pred_sq, gt_sq), eps)
    return F.sub(1.0, F.mean(F.div(num, den)))


def soft_dice_from_logits(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    return soft_dice_loss(F.sigmoid(logits), target, eps)
