"""Weighted fusion of per-level class distributions and its loss.

For a weight vector ``w`` (one entry per magnification level) and a
prediction stack ``P`` (levels x classes):

    W_pred    = w[:, None] * P            (weights broadcast over classes)
    W_sum     = W_pred.sum(axis=0)        (one score per class, in [0, inf))
    W_softmax = softmax(W_sum)
    loss      = -sum(gt * log(W_softmax))

All functions accept a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch

LOG_EPS = 1e-12


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``y``."""
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


@dataclass(frozen=True)
class FusionResult:
    w_pred: np.ndarray
    w_sum: np.ndarray
    w_softmax: np.ndarray


def _check(w: np.ndarray, P: np.ndarray) -> None:
    if P.ndim < 2 or w.shape != P.shape[:-1]:
        raise ShapeMismatch(f"weights {w.shape} do not match prediction stack {P.shape}")


def weighted_fuse(w: np.ndarray, P: np.ndarray) -> FusionResult:
    w = np.asarray(w, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    _check(w, P)
    w_pred = w[..., None] * P
    w_sum = w_pred.sum(axis=-2)
    return FusionResult(w_pred, w_sum, softmax(w_sum))


def weighted_fuse_backward(w: np.ndarray, P: np.ndarray, d_w_sum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``W_sum`` w.r.t. ``w`` and ``P``."""
    d_w_sum = np.asarray(d_w_sum, dtype=np.float64)
    return np.einsum("...ln,...n->...l", P, d_w_sum), w[..., None] * d_w_sum[..., None, :]


def fusion_loss(w_softmax: np.ndarray, gt: np.ndarray) -> np.ndarray | float:
    """Categorical cross-entropy with the log clamped at 1e-12."""
    w_softmax = np.asarray(w_softmax, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if w_softmax.shape != gt.shape:
        raise ShapeMismatch(f"prediction {w_softmax.shape} vs ground truth {gt.shape}")
    loss = -np.sum(gt * np.log(np.maximum(w_softmax, LOG_EPS)), axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def fusion_loss_backward(w_softmax: np.ndarray, gt: np.ndarray) -> np.ndarray:
    # d/dx log(max(x, eps)) vanishes where the clamp is active
    active = w_softmax >= LOG_EPS
    return np.where(active, -gt / np.maximum(w_softmax, LOG_EPS), 0.0)


def fused_loss_wrt_weights(w: np.ndarray, P: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray | float, np.ndarray]:
    """Loss of fusing with weights ``w`` and its gradient w.r.t. ``w``.

    Without an active clamp the gradient reduces to
    ``sum_i (W_softmax_i - gt_i) * P[l, i]``.
    """
    res = weighted_fuse(w, P)
    loss = fusion_loss(res.w_softmax, gt)
    d_sum = softmax_backward(res.w_softmax, fusion_loss_backward(res.w_softmax, gt))
    d_w, _ = weighted_fuse_backward(np.asarray(w, dtype=np.float64), np.asarray(P, dtype=np.float64), d_sum)
    return loss, d_w
