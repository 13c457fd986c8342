"""Segmentation losses on logit masks.

Each loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the logits, ready to feed :meth:`UNetLite.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import sigmoid

DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    alpha_bce: float = 0.25
    alpha_dice: float = 1.0
    w_c: float = 1.0

    def __post_init__(self):
        for name in ("alpha_bce", "alpha_dice", "w_c"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")


def _check(x, y):
    if x.shape != y.shape:
        raise DimensionError(f"logits {x.shape} and targets {y.shape} differ")


def bce_loss(x, y, w_c=1.0):
    """Class-weighted binary cross-entropy averaged over pixels and batch.

    Targets may be soft (mixup). The positive term is scaled by ``w_c``.
    """
    _check(x, y)
    log_p = -np.logaddexp(0.0, -x)      # log sigma(x)
    log_q = -np.logaddexp(0.0, x)       # log (1 - sigma(x))
    loss = -(w_c * y * log_p + (1 - y) * log_q).mean()
    s = sigmoid(x)
    grad = (-w_c * y * (1 - s) + (1 - y) * s) / x.size
    return float(loss), grad.astype(x.dtype, copy=False)


def dice_coefficient(probs, y, smooth=DICE_SMOOTH):
    """Per-sample soft Dice, averaged over the batch (first axis)."""
    _check(probs, y)
    n = probs.shape[0]
    p = probs.reshape(n, -1)
    t = y.reshape(n, -1)
    num = 2 * (p * t).sum(axis=1) + smooth
    den = p.sum(axis=1) + t.sum(axis=1) + smooth
    return float((num / den).mean())


def dice_loss(x, y, smooth=DICE_SMOOTH):
    """``1 - dice_coefficient(sigmoid(x), y)`` and its logit gradient."""
    _check(x, y)
    n = x.shape[0]
    s = sigmoid(x)
    p = s.reshape(n, -1)
    t = y.reshape(n, -1)
    num = 2 * (p * t).sum(axis=1, keepdims=True) + smooth
    den = p.sum(axis=1, keepdims=True) + t.sum(axis=1, keepdims=True) + smooth
    dc = num / den
    dprob = -(2 * t * den - num) / (den * den) / n
    grad = (dprob * p * (1 - p)).reshape(x.shape)
    return float(1.0 - dc.mean()), grad.astype(x.dtype, copy=False)


def detection_loss(x, y, weights=None):
    """Weighted sum of BCE and Dice loss; returns ``(value, grad, parts)``."""
    weights = weights or LossWeights()
    bce, g_bce = bce_loss(x, y, weights.w_c)
    dl, g_dice = dice_loss(x, y)
    value = weights.alpha_bce * bce + weights.alpha_dice * dl
    grad = weights.alpha_bce * g_bce + weights.alpha_dice * g_dice
    return value, grad, {"bce": bce, "dice": dl}


def class_weight(masks, lo=1.0, hi=100.0):
    """Background-to-foreground pixel ratio of a mask set, clamped."""
    fg = float(np.sum(masks))
    bg = float(np.size(masks)) - fg
    if fg <= 0:
        return hi
    return float(np.clip(bg / fg, lo, hi))
