"""Cross-entropy + Dice training objective."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import log_softmax_c, softmax_c
from .tensor import Tensor

DICE_SMOOTH = 1e-5


def one_hot(target: np.ndarray, num_classes: int, dtype=None) -> np.ndarray:
    """(B, H, W) integer ids -> (B, K, H, W) indicator array."""
    target = np.asarray(target)
    bad = np.argwhere((target < 0) | (target >= num_classes))
    if len(bad):
        raise ValueError(
            f"class id {int(target[tuple(bad[0])])} at {tuple(int(i) for i in bad[0])} "
            f"is outside [0, {num_classes})"
        )
    k = np.arange(num_classes).reshape(1, -1, 1, 1)
    return (target[:, None] == k).astype(dtype or T.default_dtype())


def _check(logits: Tensor, target) -> np.ndarray:
    target = np.asarray(target)
    b, k, h, w = logits.shape
    if target.shape != (b, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    return one_hot(target, k, logits.data.dtype)


def ce_loss(logits: Tensor, target) -> Tensor:
    onehot = _check(logits, target)
    b, _, h, w = logits.shape
    picked = T.sum(log_softmax_c(logits) * onehot)
    return T.scale(picked, -1.0 / (b * h * w))


def dice_loss(logits: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean soft Dice over every class, background included."""
    onehot = _check(logits, target)
    p = softmax_c(logits)
    inter = T.sum(p * onehot, ("B", "H", "W"))
    denom = T.sum(p, ("B", "H", "W")) + (onehot.sum(axis=(0, 2, 3), keepdims=True) + smooth)
    dice = (T.scale(inter, 2.0) + smooth) / denom
    return 1.0 - T.mean(dice, ("C",))


def combined_loss(logits: Tensor, target) -> Tensor:
    return ce_loss(logits, target) + dice_loss(logits, target)
