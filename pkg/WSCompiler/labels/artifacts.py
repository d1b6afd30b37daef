import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from WSCompiler.labels.labelmodel import (
    ProbLabels, SourceModel, fit_em, posterior_labels, source_coverage
)
from WSCompiler.labels.matrix import LabelMatrix, UnitRef, build_label_matrix
from WSCompiler.schema.schema import Schema, schema_hash
from WSCompiler.store.rowstore import RowStore
from WSCompiler.utils.config import LabelModelConfig
from WSCompiler.utils.errors import StoreFormatError, StoreIoError
from WSCompiler.utils.hashing import canonical_bytes, sha256_bytes
from WSCompiler.utils.logger import get_logger

logger = get_logger(__name__)


def labels_path(store_path: Union[str, Path], task: str) -> Path:
    store_path = Path(store_path)
    return store_path.with_name(f"{store_path.name}.{task}.labels.json")


@dataclass
class TaskLabels:
    """One task's fitted label model plus its probabilistic labels."""
    model: SourceModel
    labels: ProbLabels
    coverage: float = 0.0
    source_coverage: Dict[str, float] = field(default_factory=dict)
    store_digest: str = ""
    schema_hash: int = 0

    def to_document(self) -> dict:
        return {
            "task": self.model.task,
            "accuracies": self.model.accuracies,
            "prior": self.model.class_prior,
            "log_likelihood": self.model.log_likelihood,
            "history": self.model.history,
            "iterations": self.model.iterations,
            "seed": self.model.seed,
            "coverage": self.coverage,
            "source_coverage": self.source_coverage,
            "store_digest": self.store_digest,
            "schema_hash": self.schema_hash,
            "units": [list(u) for u in self.labels.units],
            "labels": [None if p is None else [float(x) for x in p] for p in self.labels.probs]
        }

    @classmethod
    def from_document(cls, doc: dict) -> "TaskLabels":
        model = SourceModel(
            task=doc["task"],
            accuracies={k: float(v) for k, v in doc["accuracies"].items()},
            class_prior=[float(p) for p in doc["prior"]],
            log_likelihood=float(doc["log_likelihood"]),
            history=[float(x) for x in doc.get("history", [])],
            iterations=int(doc.get("iterations", 0)),
            seed=int(doc.get("seed", 0))
        )
        labels = ProbLabels(
            task=doc["task"],
            units=[UnitRef(*u) for u in doc["units"]],
            probs=[None if p is None else np.asarray(p, dtype=np.float64) for p in doc["labels"]]
        )
        return cls(
            model=model,
            labels=labels,
            coverage=float(doc.get("coverage", 0.0)),
            source_coverage=dict(doc.get("source_coverage", {})),
            store_digest=doc.get("store_digest", ""),
            schema_hash=int(doc.get("schema_hash", 0))
        )

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_document())

    @property
    def digest(self) -> str:
        return sha256_bytes(self.to_bytes())


def fit_task_labels(store: RowStore, schema: Schema, task: str, rows: Sequence[int],
                    config: Optional[LabelModelConfig] = None, seed: int = 0) -> Tuple[LabelMatrix, TaskLabels]:
    config = config or LabelModelConfig()
    matrix = build_label_matrix(store, schema, task, rows)
    model = fit_em(matrix, max_iters=config.max_iters, tol=config.tol, seed=seed)
    labels = posterior_labels(model, matrix)
    coverage = float(np.mean(matrix.voted_mask())) if matrix.n_units else 0.0
    per_source = source_coverage(matrix)
    for s, rate in per_source.items():
        logger.info("task %s: source %s votes on %.1f%% of units, accuracy %.4f", task, s, 100 * rate,
                    model.accuracies[s])
    return matrix, TaskLabels(
        model=model,
        labels=labels,
        coverage=coverage,
        source_coverage=per_source,
        store_digest=store.digest,
        schema_hash=schema_hash(schema)
    )


def save_labels(path: Union[str, Path], task_labels: TaskLabels) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(task_labels.to_bytes())
    except OSError as e:
        raise StoreIoError(f"Cannot write labels artifact {path}: {e}")
    return path


def load_labels(path: Union[str, Path]) -> TaskLabels:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise StoreIoError(f"Cannot read labels artifact {path}: {e}")
    except ValueError as e:
        raise StoreFormatError(f"Corrupt labels artifact {path}: {e}")
    return TaskLabels.from_document(doc)


def load_all_labels(store_path: Union[str, Path], schema: Schema) -> Dict[str, TaskLabels]:
    """读取 store 旁边已有的 labels 产物，没有拟合过的任务跳过。"""
    result: Dict[str, TaskLabels] = {}
    for task in schema.tasks:
        path = labels_path(store_path, task.name)
        if path.exists():
            result[task.name] = load_labels(path)
    return result


def label_digests(labels: Dict[str, TaskLabels]) -> Dict[str, str]:
    return {task: labels[task].digest for task in sorted(labels)}


def prob_labels(labels: Dict[str, TaskLabels]) -> Dict[str, ProbLabels]:
    return {task: tl.labels for task, tl in labels.items()}

