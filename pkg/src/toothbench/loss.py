"""Two-term soft dice and the weighted dice training loss.

For a probability map ``p`` and binary reference ``r``::

    fg = (2 * sum(p * r) + eps) / (sum(p + r) + eps)
    bg = (2 * sum((1 - p) * (1 - r)) + eps) / (sum(2 - p - r) + eps)
    loss = 1 - w1 * fg - w2 * bg

Both weighted terms are subtracted so a perfect prediction has zero loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import check_weights
from .volume import Volume


@dataclass(frozen=True)
class LossConfig:
    w1: float = 0.1
    w2: float = 0.9
    epsilon: float = 1e-6

    def __post_init__(self):
        check_weights(self.w1, self.w2)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class LossValue:
    total: float
    fg_dice: float
    bg_dice: float


def _arrays(p, r) -> tuple[np.ndarray, np.ndarray]:
    pa = np.asarray(p.data if isinstance(p, Volume) else p, dtype=np.float64)
    ra = np.asarray(r.data if isinstance(r, Volume) else r, dtype=np.float64)
    if pa.shape != ra.shape:
        raise ValueError(f"dimension mismatch: {pa.shape} vs {ra.shape}")
    return pa, ra


def _terms(p: np.ndarray, r: np.ndarray, eps: float):
    # fsum keeps the reductions exact and order-independent
    fg_num = 2.0 * math.fsum((p * r).ravel().tolist()) + eps
    fg_den = math.fsum((p + r).ravel().tolist()) + eps
    bg_num = 2.0 * math.fsum(((1.0 - p) * (1.0 - r)).ravel().tolist()) + eps
    bg_den = math.fsum((2.0 - p - r).ravel().tolist()) + eps
    if fg_den == 0 or bg_den == 0:
        raise ZeroDivisionError("dice denominator is zero; use epsilon > 0")
    return fg_num, fg_den, bg_num, bg_den


def elementwise_dsc(p, r, epsilon: float = 1e-6) -> tuple[float, float, float]:
    """(foreground dice, background dice, their sum)."""
    fg_num, fg_den, bg_num, bg_den = _terms(*_arrays(p, r), epsilon)
    fg, bg = fg_num / fg_den, bg_num / bg_den
    return fg, bg, fg + bg


def weighted_dice_loss(p, r, cfg: LossConfig | None = None) -> LossValue:
    cfg = cfg or LossConfig()
    fg, bg, _ = elementwise_dsc(p, r, cfg.epsilon)
    return LossValue(total=1.0 - cfg.w1 * fg - cfg.w2 * bg, fg_dice=fg, bg_dice=bg)


def loss_gradient(p, r, cfg: LossConfig | None = None):
    """d(loss)/d(p_n) for every voxel, computed in float64.

    Returns an intensity Volume when ``p`` is a Volume, else an array.
    """
    cfg = cfg or LossConfig()
    pa, ra = _arrays(p, r)
    fg_num, fg_den, bg_num, bg_den = _terms(pa, ra, cfg.epsilon)
    d_fg = (2.0 * ra * fg_den - fg_num) / fg_den**2
    d_bg = (bg_num - 2.0 * (1.0 - ra) * bg_den) / bg_den**2
    grad = -cfg.w1 * d_fg - cfg.w2 * d_bg
    if isinstance(p, Volume):
        return Volume(grad, p.spacing, "intensity")
    return grad
