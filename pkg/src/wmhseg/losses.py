"""Training loss: binary cross-entropy plus soft Dice.

The Dice term is implemented as 1 - soft-Dice with smoothing 1.0 so the
combined objective is minimized at perfect overlap. BCE clamps predictions
to [1e-7, 1-1e-7] to keep the logs finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .tensor import Tensor

BCE_EPS = 1e-7
DICE_SMOOTHING = 1.0


@dataclass
class LossValue:
    """Combined loss with its components; total == bce + dice."""
    total: Tensor
    bce: Tensor
    dice: Tensor


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")


def _check_binary(target: Tensor) -> None:
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("target must contain only 0/1 values")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy over all elements."""
    _check_pair(pred, target)
    _check_binary(target)
    p = T.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    ll = target * T.log(p) + (1.0 - target) * T.log(1.0 - p)
    return -ll.mean()


def dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - soft-Dice with smoothing; no thresholding of predictions."""
    _check_pair(pred, target)
    s = DICE_SMOOTHING
    inter = (pred * target).sum()
    denom = pred.sum() + target.sum() + s
    return 1.0 - (2.0 * inter + s) / denom


def combined_loss(pred: Tensor, target: Tensor) -> LossValue:
    bce = bce_loss(pred, target)
    dice = dice_loss(pred, target)
    return LossValue(total=bce + dice, bce=bce, dice=dice)
