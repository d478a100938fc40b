"""Task losses and the variational training objective.

The objective for one mini-batch of size ``M`` drawn from ``N`` examples is::

    total = (N / M) * (nll_1 + nll_2) + lambda1 * sum ||M_k||^2 - lambda2 * sum H(p_k)

with both sums running over the kernels of SFG layers only. The prior
length-scale is folded into ``lambda1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, ops
from .concrete import entropy
from .sfg import SfgLayer

DEFAULT_LAMBDA1 = 1e-6
DEFAULT_LAMBDA2 = 1e-5
DICE_SMOOTH = 1e-5


@dataclass
class LossTerms:
    nll_task1: float
    nll_task2: float
    weight_l2: float
    entropy_sum: float
    total: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class KLTerms:
    weight_l2: Tensor
    entropy_sum: Tensor
    combined: Tensor


def nll_regression(pred: Tensor, target) -> Tensor:
    """Root-mean-squared error over every element of the batch."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("empty batch")
    if pred.size != target.size:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = ops.reshape(pred, target.shape) - Tensor(target)
    return ops.sqrt(ops.mean(diff * diff))


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes}): min {labels.min()}, max {labels.max()}")
    return labels


def nll_classification(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` [B, C] against integer ``labels`` [B]."""
    labels = _check_labels(labels, logits.shape[1])
    return ops.neg(ops.mean(ops.pick(ops.log_softmax(logits, axis=1), labels, axis=1)))


def soft_dice_loss(probs: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - mean_c dice_c`` with per-class soft Dice pooled over the batch."""
    C = probs.shape[1]
    onehot = np.moveaxis(np.eye(C)[labels], -1, 1)  # [B, C, H, W]
    axes = (0, 2, 3)
    inter = ops.sum(probs * Tensor(onehot), axis=axes)
    denom = ops.sum(probs, axis=axes) + Tensor(onehot.sum(axis=axes))
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - ops.mean(dice)


def dice_ce(pred_logits: Tensor, label_map, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss plus mean per-pixel cross-entropy for [B, C, H, W] logits."""
    labels = _check_labels(label_map, pred_logits.shape[1])
    if labels.shape != (pred_logits.shape[0],) + pred_logits.shape[2:]:
        raise ValueError(f"label map shape {labels.shape} does not match logits {pred_logits.shape}")
    dice = soft_dice_loss(ops.softmax(pred_logits, axis=1), labels, smooth)
    ce = ops.neg(ops.mean(ops.pick(ops.log_softmax(pred_logits, axis=1), labels, axis=1)))
    return dice + ce


def kl_surrogate(layers: Sequence[SfgLayer], lambda1: float = DEFAULT_LAMBDA1,
                 lambda2: float = DEFAULT_LAMBDA2) -> KLTerms:
    """L2 on SFG kernels minus grouping entropy, weighted by ``lambda1``/``lambda2``."""
    l2 = Tensor(0.0)
    ent = Tensor(0.0)
    for layer in layers:
        k = layer.kernels
        l2 = l2 + ops.sum(k * k)
        ent = ent + ops.sum(entropy(layer.grouping))
    return KLTerms(l2, ent, lambda1 * l2 - lambda2 * ent)


def total_loss(nll1: Tensor, nll2: Tensor, kl: KLTerms, n_total: int, batch_size: int) -> Tensor:
    if not n_total >= batch_size >= 1:
        raise ValueError(f"need N >= M >= 1, got N={n_total}, M={batch_size}")
    return (n_total / batch_size) * (nll1 + nll2) + kl.combined


def loss_for_head(kind: str, out: Tensor, target) -> Tensor:
    if kind in ("regression", "dense_regression"):
        return nll_regression(out, target)
    if kind == "classification":
        return nll_classification(out, target)
    if kind == "segmentation":
        return dice_ce(out, target)
    raise ValueError(f"unknown head kind {kind!r}")
