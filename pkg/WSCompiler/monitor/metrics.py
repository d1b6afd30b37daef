"""Metric kernels. Every number is derived from a confusion matrix."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix

from WSCompiler.schema.schema import TaskKind


@dataclass
class TaskMetrics:
    n_units: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: Optional[List[List[int]]] = None
    per_bit: Dict[str, Dict[str, float]] = field(default_factory=dict)
    bit_confusion: Dict[str, List[List[int]]] = field(default_factory=dict)


def confusion(gold: Sequence[int], pred: Sequence[int], k: int) -> np.ndarray:
    """rows = gold class, columns = predicted class."""
    if len(gold) == 0:
        return np.zeros((k, k), dtype=np.int64)
    return confusion_matrix(np.asarray(gold), np.asarray(pred), labels=list(range(k))).astype(np.int64)


def _safe_div(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def accuracy_from_confusion(cm: np.ndarray) -> float:
    return _safe_div(np.trace(cm), cm.sum())


def class_prf(cm: np.ndarray, c: int) -> Tuple[float, float, float]:
    tp = cm[c, c]
    precision = _safe_div(tp, cm[:, c].sum())
    recall = _safe_div(tp, cm[c, :].sum())
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_prf(cm: np.ndarray) -> Tuple[float, float, float]:
    scores = np.array([class_prf(cm, c) for c in range(cm.shape[0])])
    return tuple(float(x) for x in scores.mean(axis=0))


def multiclass_metrics(gold: Sequence[int], pred: Sequence[int], k: int) -> TaskMetrics:
    cm = confusion(gold, pred, k)
    # 二分类用下标 1 作为正类，多分类取宏平均
    p, r, f1 = class_prf(cm, 1) if k == 2 else macro_prf(cm)
    return TaskMetrics(len(gold), accuracy_from_confusion(cm), p, r, f1, cm.tolist())


def bitvector_metrics(gold: Sequence[int], pred: Sequence[int], bits: Sequence[int],
                      bit_names: Sequence[str]) -> TaskMetrics:
    gold, pred, bits = np.asarray(gold), np.asarray(pred), np.asarray(bits)
    per_bit: Dict[str, Dict[str, float]] = {}
    cms: Dict[str, List[List[int]]] = {}
    scores = []
    for b, name in enumerate(bit_names):
        sel = bits == b
        cm = confusion(gold[sel], pred[sel], 2)
        p, r, f1 = class_prf(cm, 1)
        per_bit[name] = {"precision": p, "recall": r, "f1": f1, "accuracy": accuracy_from_confusion(cm)}
        cms[name] = cm.tolist()
        scores.append((p, r, f1))
    p, r, f1 = (float(x) for x in np.mean(scores, axis=0)) if scores else (0.0, 0.0, 0.0)
    accuracy = _safe_div(np.sum(gold == pred), gold.size)
    return TaskMetrics(int(gold.size), accuracy, p, r, f1, None, per_bit, cms)


def select_metrics(gold: Sequence[int], pred: Sequence[int]) -> TaskMetrics:
    gold, pred = np.asarray(gold), np.asarray(pred)
    accuracy = _safe_div(np.sum(gold == pred), gold.size)
    return TaskMetrics(int(gold.size), accuracy, accuracy, accuracy, accuracy)


def task_metrics(kind: TaskKind, labels: Sequence[str], gold: Sequence[int], pred: Sequence[int],
                 bits: Optional[Sequence[int]] = None) -> TaskMetrics:
    if kind == TaskKind.MULTICLASS:
        return multiclass_metrics(gold, pred, len(labels))
    if kind == TaskKind.BITVECTOR:
        return bitvector_metrics(gold, pred, bits, labels)
    return select_metrics(gold, pred)


def selection_metric(kind: TaskKind, metrics: TaskMetrics) -> float:
    """Accuracy for Multiclass/Select, macro-F1 for Bitvector."""
    return metrics.f1 if kind == TaskKind.BITVECTOR else metrics.accuracy
