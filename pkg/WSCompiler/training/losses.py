"""
Noise-aware losses against probabilistic labels.

Batch helpers return (loss, d_loss/d_logits) so the trainer can seed the
reverse pass directly at the logits nodes.
"""

from typing import Optional, Tuple

import numpy as np

from WSCompiler.numerics.ops import sigmoid
from WSCompiler.schema.schema import TaskKind

PROB_FLOOR = 1e-300


def log_softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    x = logits if mask is None else np.where(mask, logits, -np.inf)
    shift = np.max(x, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    z = x - shift
    # 全部被屏蔽的行得到 NaN，调用方用 mask 清掉
    with np.errstate(divide="ignore", invalid="ignore"):
        log_total = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
        return z - log_total


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray,
                          mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """
    sum_u w_u * (-sum_c q_uc log p_uc) over the leading axes.
    targets has the logits' shape; weights drops the class axis.
    """
    log_p = log_softmax(logits, mask)
    if mask is not None:
        log_p = np.where(mask, log_p, 0.0)
    per_unit = -np.sum(targets * log_p, axis=-1)
    loss = float(np.sum(weights * per_unit))
    p = np.exp(log_p) if mask is None else np.where(mask, np.exp(log_p), 0.0)
    # 软标签之和为 0 的单元（弃权）没有梯度
    mass = np.sum(targets, axis=-1, keepdims=True)
    grad = weights[..., None] * (p * mass - targets)
    return loss, grad


def binary_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Elementwise BCE with logits: w * (softplus(l) - t * l)."""
    per_unit = np.logaddexp(0.0, logits) - targets * logits
    loss = float(np.sum(weights * per_unit))
    grad = weights * (sigmoid(logits) - targets)
    return loss, grad


def noise_aware_loss(values, soft_label, weight: float, kind: TaskKind = TaskKind.MULTICLASS,
                     from_logits: bool = True) -> float:
    """
    Loss of one unit. Multiclass/Select: weight * cross-entropy against the
    soft label. Bitvector: `values` holds one entry per bit and `soft_label`
    the probability that each bit is on. An ABSTAINED unit (None) costs 0.
    """
    if soft_label is None or weight == 0:
        return 0.0
    v = np.asarray(values, dtype=np.float64)
    q = np.asarray(soft_label, dtype=np.float64)
    if kind == TaskKind.BITVECTOR:
        if from_logits:
            per_bit = np.logaddexp(0.0, v) - q * v
        else:
            p = np.clip(v, PROB_FLOOR, 1.0)
            not_p = np.clip(1.0 - v, PROB_FLOOR, 1.0)
            per_bit = -(q * np.log(p) + (1.0 - q) * np.log(not_p))
        return float(weight * np.sum(per_bit))
    log_p = log_softmax(v) if from_logits else np.log(np.clip(v, PROB_FLOOR, 1.0))
    return float(weight * -np.sum(q * log_p))
