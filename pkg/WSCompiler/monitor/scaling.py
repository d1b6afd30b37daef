"""
Data-scaling harness: train on growing subsamples of the train rows and
report quality relative to the smallest subsample.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from WSCompiler.compiler.candidates import ArchChoice
from WSCompiler.compiler.compiler import compile as compile_model
from WSCompiler.labels.labelmodel import ProbLabels
from WSCompiler.monitor.metrics import selection_metric
from WSCompiler.monitor.monitor import evaluate, gold_labels
from WSCompiler.schema.schema import Schema
from WSCompiler.store.rowstore import RowStore
from WSCompiler.training.trainer import TrainConfig, train
from WSCompiler.utils.config import TrainDefaults
from WSCompiler.utils.errors import StoreIoError
from WSCompiler.utils.logger import get_logger, log_stage

logger = get_logger(__name__)

SCALING_COLUMNS = ("fraction", "seed", "task", "metric", "relative_quality")


@dataclass
class ScalingPoint:
    fraction: float
    seed: int
    task: str
    metric: float
    relative_quality: Optional[float]
    n_rows: int = 0


@dataclass
class ScalingResult:
    points: List[ScalingPoint] = field(default_factory=list)

    def summary(self) -> pd.DataFrame:
        """Mean relative quality per (fraction, task) and each fraction's multiple of the smallest."""
        frame = pd.DataFrame([vars(p) for p in self.points])
        if frame.empty:
            return pd.DataFrame(columns=["fraction", "multiplier", "task", "relative_quality"])
        smallest = frame["fraction"].min()
        grouped = frame.groupby(["fraction", "task"], sort=True)["relative_quality"].mean().reset_index()
        grouped.insert(1, "multiplier", (grouped["fraction"] / smallest).round().astype(int))
        return grouped

    def curve(self, task: str) -> List[Tuple[int, float]]:
        s = self.summary()
        s = s[s["task"] == task]
        return [(int(m), float(q)) for m, q in zip(s["multiplier"], s["relative_quality"])]


def subsample(rows: Sequence[int], fraction: float, seed: int) -> List[int]:
    """
    round(f * n) rows from a per-seed permutation; larger fractions extend
    smaller ones. A non-empty row list always yields at least one row, so a
    fraction with round(f * n) == 0 is raised to 1.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    order = np.random.default_rng(seed).permutation(len(rows))
    n = int(round(fraction * len(rows)))
    if rows and n == 0:
        logger.warning("fraction %g of %d train rows rounds to 0; using 1 row", fraction, len(rows))
        n = 1
    return sorted(rows[i] for i in order[:n])


def scaling_curve(schema: Schema, store: RowStore, labels: Dict[str, ProbLabels], choice: ArchChoice,
                  fractions: Sequence[float], seeds: Sequence[int],
                  defaults: Optional[TrainDefaults] = None) -> ScalingResult:
    fractions = sorted(fractions)
    train_rows = store.rows_with_tag("train")
    test_rows = store.rows_with_tag("test")
    gold = gold_labels(store, schema, test_rows)
    ir = compile_model(schema, choice)

    result = ScalingResult()
    for seed in seeds:
        baseline: Dict[str, float] = {}
        for fraction in fractions:
            rows = subsample(train_rows, fraction, seed)
            with log_stage(f"scaling f={fraction:g} seed={seed}", logger):
                model = train(ir, store, labels, TrainConfig.from_choice(choice, defaults, seed), rows=rows)
                report = evaluate(model, store, ["test"], gold)
            for t in schema.tasks:
                row = report.row("test", t.name)
                metric = selection_metric(t.kind, row) if row.has_metrics else 0.0
                if fraction == fractions[0]:
                    baseline[t.name] = metric
                base = baseline[t.name]
                if base > 0:
                    relative = metric / base
                else:
                    relative = None
                    logger.warning("task %s: baseline metric is 0 at seed %d, relative quality undefined",
                                   t.name, seed)
                result.points.append(ScalingPoint(fraction, seed, t.name, metric, relative, len(rows)))
    return result


def scaling_csv(result: ScalingResult) -> str:
    frame = pd.DataFrame(
        [{
            "fraction": f"{p.fraction:.6f}",
            "seed": p.seed,
            "task": p.task,
            "metric": f"{p.metric:.6f}",
            "relative_quality": "" if p.relative_quality is None else f"{p.relative_quality:.6f}",
        } for p in result.points],
        columns=list(SCALING_COLUMNS)
    )
    return frame.to_csv(index=False, lineterminator="\n")


def export_scaling(result: ScalingResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(scaling_csv(result).encode("utf-8"))
    except OSError as e:
        raise StoreIoError(f"Cannot write scaling table {path}: {e}")
    return path
