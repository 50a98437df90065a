"""Training losses: BCE on both volumes plus recall/precision on the fine one."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import LossWeights
from .errors import ContractError
from .tensor import Tensor

BCE_CLAMP = 1e-7
EPS = 1e-8


def _gt_array(gt, shape) -> np.ndarray:
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if g.shape != tuple(shape):
        raise ContractError(f"ground truth shape {g.shape} does not match prediction {tuple(shape)}")
    return g


def bce_loss(p: Tensor, gt) -> Tensor:
    """Mean over cells of -[gt ln p + (1-gt) ln(1-p)], with p clamped to [1e-7, 1-1e-7]."""
    g = _gt_array(gt, p.shape)
    q = T.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = T.log(q) * g + T.log(1.0 - q) * (1.0 - g)
    return -T.reduce_mean(terms)


def recall_loss(p: Tensor, gt) -> Tensor:
    g = _gt_array(gt, p.shape)
    if g.sum() <= 0:
        raise ContractError("recall_loss needs at least one occupied ground-truth cell")
    return 1.0 - T.reduce_sum(p * g) / (float(g.sum()) + EPS)


def precision_loss(p: Tensor, gt) -> Tensor:
    g = _gt_array(gt, p.shape)
    return 1.0 - T.reduce_sum(p * g) / (T.reduce_sum(p) + EPS)


def loss_terms(coarse: Tensor, fine: Tensor, gt) -> dict[str, Tensor]:
    return {
        "bce_coarse": bce_loss(coarse, gt),
        "bce_fine": bce_loss(fine, gt),
        "recall": recall_loss(fine, gt),
        "precision": precision_loss(fine, gt),
    }


def total_loss(coarse: Tensor, fine: Tensor, gt, w: LossWeights = LossWeights(), phase: str = "full") -> Tensor:
    """``bce_only``: alpha*BCE(V_c) + beta*BCE(V); ``full`` adds gamma*recall + mu*precision on V."""
    if phase not in ("bce_only", "full"):
        raise ContractError(f"unknown loss phase {phase!r}")
    loss = w.alpha * bce_loss(coarse, gt) + w.beta * bce_loss(fine, gt)
    if phase == "full":
        loss = loss + w.gamma * recall_loss(fine, gt) + w.mu * precision_loss(fine, gt)
    return loss
