"""Dice-variant losses with analytic gradients, boundary weights, and the
four-component target loss.

The numpy implementations are the reference: their gradients are checked
against central finite differences. Matching torch versions (suffix `_t`)
feed training; autograd on those must agree with the analytic forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

P_CLAMP = 1e-7  # predictions clamped to [P_CLAMP, 1 - P_CLAMP]
SMOOTH = 1e-7  # denominator smoothing against 0/0 on empty crops


class LossShapeError(Exception):
    pass


@dataclass
class LossConfig:
    epsilon: float = 1e-6
    boundary_weight: float = 0.8
    interior_weight: float = 0.2


@dataclass
class LossBatch:
    """Paired prediction/target/weight grids; p clamped, q binary, w > 0."""

    p: np.ndarray
    q: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.clip(np.asarray(self.p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.w is None:
            self.w = np.ones_like(self.p)
        else:
            self.w = np.asarray(self.w, dtype=np.float64)
        if not (self.p.shape == self.q.shape == self.w.shape):
            raise LossShapeError(
                f"shape mismatch p={self.p.shape} q={self.q.shape} w={self.w.shape}"
            )
        if not np.isin(self.q, (0.0, 1.0)).all():
            raise LossShapeError("targets must be binary")
        if not (self.w > 0).all():
            raise LossShapeError("weights must be strictly positive")


def dice_loss(b: LossBatch) -> float:
    """Negative weighted soft Dice overlap; -1 at perfect overlap, 0 at none."""
    num = 2.0 * np.sum(b.w * b.p * b.q)
    den = np.sum(b.w * b.p) + np.sum(b.w * b.q) + SMOOTH
    return float(-num / den)


def dice_loss_grad(b: LossBatch) -> np.ndarray:
    """d(dice_loss)/dp_j for general weights; reduces to the unweighted
    quotient-rule form when w == 1. Foreground voxels get the larger
    magnitudes, which is what counters class imbalance."""
    A = np.sum(b.w * b.p * b.q)
    B = np.sum(b.w * b.p) + np.sum(b.w * b.q) + SMOOTH
    return -2.0 * b.w * (b.q * B - A) / (B * B)


def sqrt_dice_loss(b: LossBatch, epsilon: float = 1e-6) -> float:
    """Sensitivity-boosted variant: sqrt-transformed predictions make
    misclassified foreground dominate the gradient. Unweighted."""
    s = np.sqrt(b.p + epsilon)
    num = 2.0 * np.sum(s * b.q)
    den = np.sum(s) + np.sum(b.q)
    return float(-num / den)


def sqrt_dice_loss_grad(b: LossBatch, epsilon: float = 1e-6) -> np.ndarray:
    s = np.sqrt(b.p + epsilon)
    C = np.sum(s * b.q)
    D = np.sum(s) + np.sum(b.q)
    return -(1.0 / s) * (b.q * D - C) / (D * D)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LossShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LossShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return 2.0 * (pred - target) / pred.size


_CONN6 = ndimage.generate_binary_structure(3, 1)


def boundary_weight_map(mask: np.ndarray, cfg: LossConfig | None = None) -> np.ndarray:
    """Boundary voxels (6-neighborhood sees both labels, either side of the
    interface) get cfg.boundary_weight, everything else cfg.interior_weight."""
    cfg = cfg or LossConfig()
    mask = np.asarray(mask, dtype=bool)
    struct = _CONN6 if mask.ndim == 3 else ndimage.generate_binary_structure(mask.ndim, 1)
    if mask.all() or not mask.any():
        return np.full(mask.shape, cfg.interior_weight, dtype=np.float64)
    dil = ndimage.binary_dilation(mask, structure=struct)
    ero = ndimage.binary_erosion(mask, structure=struct, border_value=1)
    boundary = dil & ~ero
    return np.where(boundary, cfg.boundary_weight, cfg.interior_weight)


def composite_ctv_loss(
    main_pred: np.ndarray,
    aux_pred_1: np.ndarray,
    aux_pred_2: np.ndarray,
    dist_pred: np.ndarray | None,
    truth_mask: np.ndarray,
    dist_target: np.ndarray | None,
    cfg: LossConfig | None = None,
) -> float:
    """Boundary-weighted Dice on the main head, plain Dice on both auxiliary
    heads, MSE on the distance head; unit combination weights."""
    cfg = cfg or LossConfig()
    w = boundary_weight_map(truth_mask, cfg)
    total = dice_loss(LossBatch(main_pred, truth_mask, w))
    total += dice_loss(LossBatch(aux_pred_1, truth_mask))
    total += dice_loss(LossBatch(aux_pred_2, truth_mask))
    if dist_pred is not None and dist_target is not None:
        total += mse_loss(dist_pred, dist_target)
    return float(total)


# --- torch counterparts used by the trainer -------------------------------


def dice_loss_t(p: torch.Tensor, q: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
    p = p.clamp(P_CLAMP, 1.0 - P_CLAMP)
    if w is None:
        w = torch.ones_like(p)
    num = 2.0 * (w * p * q).sum()
    den = (w * p).sum() + (w * q).sum() + SMOOTH
    return -num / den


def sqrt_dice_loss_t(p: torch.Tensor, q: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    s = torch.sqrt(p.clamp(P_CLAMP, 1.0 - P_CLAMP) + epsilon)
    num = 2.0 * (s * q).sum()
    den = s.sum() + q.sum()
    return -num / den


def composite_ctv_loss_t(
    main_pred: torch.Tensor,
    aux_pred_1: torch.Tensor,
    aux_pred_2: torch.Tensor,
    dist_pred: torch.Tensor | None,
    truth_mask: torch.Tensor,
    dist_target: torch.Tensor | None,
    boundary_w: torch.Tensor,
) -> torch.Tensor:
    total = dice_loss_t(main_pred, truth_mask, boundary_w)
    total = total + dice_loss_t(aux_pred_1, truth_mask)
    total = total + dice_loss_t(aux_pred_2, truth_mask)
    if dist_pred is not None and dist_target is not None:
        total = total + torch.mean((dist_pred - dist_target) ** 2)
    return total
