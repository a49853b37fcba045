"""Supervised losses, the warm-up schedule, and total-loss composition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ContractError, TrainingAborted

_f32 = np.float32

DICE_SMOOTH = 1e-5


def dice_loss(probs: Tensor, label: np.ndarray) -> Tensor:
    """1 - mean soft Dice over the foreground classes.

    probs must already be softmaxed over the class axis; the smoothing
    constant keeps empty classes from dividing zero by zero.
    """
    c = probs.data.shape[0]
    if label.shape != probs.data.shape[1:]:
        raise ContractError(f"label shape {label.shape} != probs spatial {probs.data.shape[1:]}")
    total = None
    for cls in range(1, c):
        y = (label == cls).astype(_f32)
        p_c = E.getitem(probs, (cls,))
        inter = E.sum_(E.mul(p_c, Tensor(y)))
        denom = E.add(E.sum_(p_c), float(y.sum()) + DICE_SMOOTH)
        dice = E.mul(E.add(E.scale(inter, 2.0), DICE_SMOOTH), E.reciprocal(denom))
        total = dice if total is None else E.add(total, dice)
    mean_dice = E.scale(total, 1.0 / (c - 1))
    return E.add(E.scale(mean_dice, -1.0), 1.0)


def ce_loss(logits: Tensor, label: np.ndarray) -> Tensor:
    """Mean voxel-wise categorical cross-entropy with log-sum-exp stabilization."""
    c = logits.data.shape[0]
    if label.shape != logits.data.shape[1:]:
        raise ContractError(f"label shape {label.shape} != logits spatial {logits.data.shape[1:]}")
    n = int(np.prod(label.shape))
    flat = E.reshape(logits, (c, n))
    m = Tensor(flat.data.max(axis=0, keepdims=True))  # constant shift, gradient-exact
    z = E.sub(flat, E.expand(m, (c, n)))
    lse = E.add(E.log(E.sum_(E.exp(z), axis=0)), E.reshape(m, (n,)))
    idx = label.reshape(-1).astype(np.int64) * n + np.arange(n, dtype=np.int64)
    picked = E.gather(flat, idx)
    return E.mean_(E.sub(lse, picked))


def sup_loss(dice: Tensor, ce: Tensor) -> Tensor:
    """Hybrid supervision: the mean of the Dice and cross-entropy terms."""
    return E.scale(E.add(dice, ce), 0.5)


def ramp_lambda(t: int, t_max: int) -> float:
    """Warm-up weight 0.1 * exp(-5 (1 - t/t_max)^2), clamped at t_max."""
    if t_max <= 0:
        raise ContractError("t_max must be positive")
    if t < 0:
        raise ContractError("t must be nonnegative")
    t = min(t, t_max)
    frac = 1.0 - t / t_max
    return 0.1 * math.exp(-5.0 * frac * frac)


@dataclass
class LossBreakdown:
    l_sup: float
    l_d: float
    l_ec: float
    lam: float
    l_total: float
    fa_skipped: bool = False
    ec_skipped: bool = False

    def log_record(self, t: int) -> dict:
        return {
            "t": t,
            "L_sup": self.l_sup,
            "L_D": self.l_d,
            "L_EC": self.l_ec,
            "lambda": self.lam,
            "L_total": self.l_total,
            "fa_skipped": self.fa_skipped,
            "ec_skipped": self.ec_skipped,
        }


def total_loss(
    l_sup: Tensor,
    l_d: Tensor | None,
    l_ec: Tensor | None,
    lam: float,
    fa_skipped: bool = False,
    ec_skipped: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """L_total = L_sup + lambda * (L_D + L_EC); skipped terms contribute zero."""
    vals = [l_sup.item(), l_d.item() if l_d is not None else 0.0,
            l_ec.item() if l_ec is not None else 0.0]
    if not all(math.isfinite(v) for v in vals):
        raise TrainingAborted(
            f"non-finite loss terms: sup={vals[0]}, d={vals[1]}, ec={vals[2]}"
        )
    total = l_sup
    aux = None
    if l_d is not None:
        aux = l_d
    if l_ec is not None:
        aux = l_ec if aux is None else E.add(aux, l_ec)
    if aux is not None:
        total = E.add(total, E.scale(aux, lam))
    breakdown = LossBreakdown(
        l_sup=vals[0], l_d=vals[1], l_ec=vals[2], lam=lam,
        l_total=total.item(), fa_skipped=fa_skipped, ec_skipped=ec_skipped,
    )
    return total, breakdown
