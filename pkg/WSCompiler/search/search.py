"""
Random search over coarse architecture choices.

Each trial compiles one candidate, trains it with a seed derived from
(tuning.seed, trial index) and scores it on dev rows. Trials may run on a
thread pool; results are ordered by trial index, so the selected model does
not depend on scheduling.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from WSCompiler.compiler.candidates import ArchChoice, enumerate_candidates
from WSCompiler.compiler.compiler import compile as compile_model
from WSCompiler.labels.labelmodel import ProbLabels
from WSCompiler.monitor.metrics import selection_metric, task_metrics
from WSCompiler.monitor.monitor import Gold, gold_labels
from WSCompiler.schema.schema import Schema, TaskKind, TuningSpec, sequence_aggregators
from WSCompiler.store.rowstore import RowStore
from WSCompiler.training.trainer import TrainConfig, TrainedModel, predict_units, train
from WSCompiler.utils.config import TrainDefaults
from WSCompiler.utils.errors import SearchFailed, StoreIoError, WSCError
from WSCompiler.utils.logger import LoggerMixin

U64_MASK = (1 << 64) - 1


@dataclass
class TrialResult:
    trial_id: int
    choice: ArchChoice
    seed: int
    dev_metric: float
    per_task: Dict[str, float]
    per_slice: Dict[Tuple[str, str], float] = field(default_factory=dict)
    wall_time: float = 0.0
    error: Optional[str] = None
    model: Optional[TrainedModel] = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class SearchResult:
    best: TrainedModel
    best_trial: int
    trials: List[TrialResult]


def trial_seed(tuning_seed: int, trial_id: int) -> int:
    state = np.random.SeedSequence([tuning_seed, trial_id]).generate_state(1, dtype=np.uint64)
    return int(state[0]) & U64_MASK


class RandomSearch(LoggerMixin):
    def __init__(self, schema: Schema, store: RowStore, labels: Dict[str, ProbLabels],
                 tuning: Optional[TuningSpec] = None, defaults: Optional[TrainDefaults] = None,
                 threads: int = 1, label_digests: Optional[Dict[str, str]] = None):
        self.schema = schema
        self.store = store
        self.labels = labels
        self.tuning = tuning or schema.tuning
        self.defaults = defaults or TrainDefaults()
        self.threads = max(1, threads)
        self.label_digests = label_digests or {}
        self.dev_rows = store.rows_with_tag("dev")
        self.train_rows = store.rows_with_tag("train")
        self._gold: Optional[Gold] = None

    @property
    def gold(self) -> Gold:
        if self._gold is None:
            self._gold = gold_labels(self.store, self.schema, self.dev_rows)
        return self._gold

    def _score(self, model: TrainedModel, rows: List[int]) -> Dict[str, float]:
        keep = set(rows)
        predictions = predict_units(model, self.store, rows)
        scores = {}
        for t in self.schema.tasks:
            units = sorted(u for u in self.gold[t.name] if u.row in keep and u in predictions[t.name])
            if not units:
                continue
            bits = [u.bit for u in units] if t.kind == TaskKind.BITVECTOR else None
            m = task_metrics(t.kind, t.labels, [self.gold[t.name][u] for u in units],
                             [predictions[t.name][u] for u in units], bits)
            scores[t.name] = selection_metric(t.kind, m)
        return scores

    def run_trial(self, trial_id: int, choice: ArchChoice, raise_errors: bool = False) -> TrialResult:
        seed = trial_seed(self.tuning.seed, trial_id)
        start = time.perf_counter()
        try:
            ir = compile_model(self.schema, choice)
            cfg = TrainConfig.from_choice(choice, self.defaults, seed)
            model = train(ir, self.store, self.labels, cfg, rows=self.train_rows, label_digests=self.label_digests)
            scores = self._score(model, self.dev_rows)
            per_task = {t.name: scores.get(t.name, 0.0) for t in self.schema.tasks}
            per_slice = {}
            for tag in self.schema.slice_tags:
                tagged = set(self.store.rows_with_tag(tag))
                sliced = self._score(model, [r for r in self.dev_rows if r in tagged])
                per_slice.update({(task, tag): v for task, v in sliced.items()})
            dev_metric = float(np.mean(list(per_task.values())))
            self.logger.info("trial %d: dev metric %.4f", trial_id, dev_metric)
            return TrialResult(trial_id, choice, seed, dev_metric, per_task, per_slice,
                               time.perf_counter() - start, model=model)
        except Exception as e:
            if raise_errors:
                raise
            if isinstance(e, WSCError):
                self.logger.warning("trial %d failed: %s", trial_id, e)
            else:
                self.logger.warning("trial %d failed: %s: %s", trial_id, type(e).__name__, e)
            return TrialResult(trial_id, choice, seed, 0.0, {t.name: 0.0 for t in self.schema.tasks},
                               wall_time=time.perf_counter() - start, error=str(e))

    def run(self) -> SearchResult:
        candidates = enumerate_candidates(self.tuning)
        if not candidates:
            raise SearchFailed("no candidates to try; budget must be >= 1")
        if not self.dev_rows:
            self.logger.warning("no dev rows: every trial scores 0")
        _ = self.gold  # 先在主线程里算好 dev gold
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            trials: List[TrialResult] = []
            best: Optional[TrialResult] = None
            # 按 trial 顺序消费，只保留当前最好的模型；平局取最早的 trial
            for trial in pool.map(self.run_trial, range(len(candidates)), candidates):
                trials.append(trial)
                if trial.failed:
                    continue
                if best is None or trial.dev_metric > best.dev_metric:
                    if best is not None:
                        best.model = None
                    best = trial
                else:
                    trial.model = None

        if best is None:
            raise SearchFailed(f"all {len(trials)} trials failed; first error: {trials[0].error}")
        self.logger.info("best trial %d of %d, dev metric %.4f", best.trial_id, len(trials), best.dev_metric)
        return SearchResult(best=best.model, best_trial=best.trial_id, trials=trials)


def run_search(schema: Schema, store: RowStore, labels: Dict[str, ProbLabels], tuning: Optional[TuningSpec] = None,
               defaults: Optional[TrainDefaults] = None, threads: int = 1,
               label_digests: Optional[Dict[str, str]] = None) -> SearchResult:
    return RandomSearch(schema, store, labels, tuning, defaults, threads, label_digests).run()


# ---------- search.results.csv ----------

def trials_frame(schema: Schema, trials: List[TrialResult], record_timing: bool = False) -> pd.DataFrame:
    aggregators = sequence_aggregators(schema)
    rows = []
    for t in trials:
        row = {"trial_id": t.trial_id}
        row.update({k: v for k, v in sorted(t.choice.resolved(aggregators).items())})
        row["dev_metric"] = f"{t.dev_metric:.6f}"
        for task in schema.tasks:
            row[f"dev_{task.name}"] = f"{t.per_task.get(task.name, 0.0):.6f}"
        row["error"] = t.error or ""
        row["wall_time"] = f"{t.wall_time:.3f}" if record_timing else ""
        rows.append(row)
    return pd.DataFrame(rows)


def export_trials(schema: Schema, trials: List[TrialResult], path: Union[str, Path],
                  record_timing: bool = False) -> Path:
    path = Path(path)
    text = trials_frame(schema, trials, record_timing).to_csv(index=False, lineterminator="\n")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(text.encode("utf-8"))
    except OSError as e:
        raise StoreIoError(f"Cannot write search results {path}: {e}")
    return path
