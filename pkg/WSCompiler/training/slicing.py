from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from WSCompiler.numerics.ops import slice_attention


@dataclass
class SliceExpert:
    indicator_prob: np.ndarray   # (...,) 属于该 slice 的概率
    expert_logits: np.ndarray    # (..., K)
    expert_repr: np.ndarray      # (..., h)


@dataclass
class SliceCombination:
    final_logits: np.ndarray
    attention: np.ndarray        # (..., n + 1)，下标 0 是 base expert
    representation: np.ndarray


def slice_combine(base_logits: np.ndarray, experts: List[SliceExpert], base_repr: Optional[np.ndarray] = None,
                  final_weight: Optional[np.ndarray] = None, final_bias: Optional[np.ndarray] = None,
                  task_kind: str = "multiclass") -> SliceCombination:
    """
    Attention a_i ~ indicator_i * confidence_i over the base expert and the
    slice experts. With a final Linear the result is Linear(sum a_i r_i);
    without one the expert logits themselves are mixed.
    """
    base_logits = np.asarray(base_logits, dtype=np.float64)
    gates = [np.ones(base_logits.shape[:-1])] + [np.asarray(e.indicator_prob, dtype=np.float64) for e in experts]
    logits = [base_logits] + [np.asarray(e.expert_logits, dtype=np.float64) for e in experts]
    attention = slice_attention(gates, logits, task_kind)["attention"]

    representation = None
    if base_repr is not None:
        reprs = [np.asarray(base_repr, dtype=np.float64)] + [np.asarray(e.expert_repr, dtype=np.float64) for e in experts]
        representation = sum(attention[..., i:i + 1] * r for i, r in enumerate(reprs))

    if final_weight is not None:
        if representation is None:
            raise ValueError("a final Linear needs the expert representations")
        bias = np.zeros(final_weight.shape[1]) if final_bias is None else final_bias
        final = representation @ final_weight + bias
    else:
        final = sum(attention[..., i:i + 1] * l for i, l in enumerate(logits))
    return SliceCombination(final_logits=final, attention=attention, representation=representation)
