"""
Per-tag and per-slice quality reports.

Reserved split tags (train/dev/test) are evaluated on their own rows; every
other tag, slices included, is evaluated on its rows that are also in test.
Gold labels are the majority vote of the evaluated rows' own supervision.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from WSCompiler.labels.labelmodel import majority_vote
from WSCompiler.labels.matrix import UnitRef, build_label_matrix
from WSCompiler.monitor.metrics import TaskMetrics, task_metrics
from WSCompiler.schema.schema import RESERVED_TAGS, Schema, TaskKind
from WSCompiler.store.rowstore import RowStore
from WSCompiler.training.trainer import TrainedModel, predict_units
from WSCompiler.utils.errors import StoreIoError
from WSCompiler.utils.logger import LoggerMixin, get_logger

logger = get_logger(__name__)

NO_GOLD = "NoGoldLabels"
METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1")
CSV_COLUMNS = ("tag", "task", "n", "accuracy", "precision", "recall", "f1", "is_slice", "confusion", "note")

Gold = Dict[str, Dict[UnitRef, int]]


@dataclass
class ReportRow:
    tag: str
    task: str
    n_units: int
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    is_slice: bool = False
    confusion: Optional[List[List[int]]] = None
    per_bit: Dict[str, Dict[str, float]] = field(default_factory=dict)
    bit_confusion: Dict[str, List[List[int]]] = field(default_factory=dict)
    note: str = ""

    @property
    def has_metrics(self) -> bool:
        return self.note != NO_GOLD


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)

    def row(self, tag: str, task: str) -> ReportRow:
        for r in self.rows:
            if r.tag == tag and r.task == task:
                return r
        raise KeyError((tag, task))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([_csv_row(r) for r in self.rows], columns=list(CSV_COLUMNS))


def evaluation_rows(store: RowStore, tag: str) -> List[int]:
    rows = store.rows_with_tag(tag)
    if tag in RESERVED_TAGS:
        return rows
    test = set(store.rows_with_tag("test"))
    return [r for r in rows if r in test]


def gold_labels(store: RowStore, schema: Schema, rows: Sequence[int]) -> Gold:
    """Majority vote per unit; units nobody voted on are left out."""
    gold: Gold = {}
    for t in schema.tasks:
        labels = majority_vote(build_label_matrix(store, schema, t.name, rows))
        gold[t.name] = {u: int(c) for u, c in zip(labels.units, labels.hard()) if c >= 0}
    return gold


def _metrics_row(tag: str, task: str, is_slice: bool, m: TaskMetrics) -> ReportRow:
    return ReportRow(
        tag=tag, task=task, n_units=m.n_units,
        accuracy=m.accuracy, precision=m.precision, recall=m.recall, f1=m.f1,
        is_slice=is_slice, confusion=m.confusion, per_bit=m.per_bit, bit_confusion=m.bit_confusion
    )


class Monitor(LoggerMixin):
    def __init__(self, model: TrainedModel, store: RowStore):
        self.model = model
        self.store = store
        self.schema = model.schema

    def evaluate(self, tags: Sequence[str], gold: Optional[Gold] = None) -> Report:
        known = set(self.store.tags)
        sections: Dict[str, List[int]] = {}
        for tag in tags:
            if tag not in known:
                self.logger.warning("tag '%s' is not in the store; its section is empty", tag)
                continue
            sections[tag] = evaluation_rows(self.store, tag)

        needed = sorted(set().union(*sections.values())) if sections else []
        if gold is None:
            gold = gold_labels(self.store, self.schema, needed)
        predictions = predict_units(self.model, self.store, needed)

        slice_tags = set(self.schema.slice_tags)
        report = Report()
        for tag, rows in sections.items():
            in_section = set(rows)
            for t in self.schema.tasks:
                units = [u for u in gold.get(t.name, {}) if u.row in in_section and u in predictions[t.name]]
                units.sort()
                if not units:
                    report.rows.append(ReportRow(tag=tag, task=t.name, n_units=0, is_slice=tag in slice_tags,
                                                 note=NO_GOLD))
                    continue
                g = [gold[t.name][u] for u in units]
                p = [predictions[t.name][u] for u in units]
                bits = [u.bit for u in units] if t.kind == TaskKind.BITVECTOR else None
                metrics = task_metrics(t.kind, t.labels, g, p, bits)
                report.rows.append(_metrics_row(tag, t.name, tag in slice_tags, metrics))
        return report


def evaluate(model: TrainedModel, store: RowStore, tags: Sequence[str], gold: Optional[Gold] = None) -> Report:
    return Monitor(model, store).evaluate(tags, gold)


def default_tags(schema: Schema) -> List[str]:
    return list(RESERVED_TAGS) + [t for t in schema.slice_tags if t not in RESERVED_TAGS]


# ---------- export ----------

def _fixed(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def _compact(value) -> str:
    return "" if not value else json.dumps(value, sort_keys=True, separators=(",", ":"))


def _csv_row(r: ReportRow) -> Dict[str, str]:
    row = {"tag": r.tag, "task": r.task, "n": str(r.n_units)}
    for name in METRIC_COLUMNS:
        row[name] = _fixed(getattr(r, name))
    row["is_slice"] = "true" if r.is_slice else "false"
    row["confusion"] = _compact(r.confusion if r.confusion is not None else r.bit_confusion)
    row["note"] = r.note
    return row


def report_csv(report: Report) -> str:
    return report.to_frame().to_csv(index=False, lineterminator="\n")


def report_json(report: Report) -> str:
    return json.dumps([asdict(r) for r in report.rows], indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def export_report(report: Report, path: Union[str, Path], fmt: str = "csv") -> Path:
    path = Path(path)
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    text = report_csv(report) if fmt == "csv" else report_json(report)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(text.encode("utf-8"))
    except OSError as e:
        raise StoreIoError(f"Cannot write report {path}: {e}")
    return path


def read_report(path: Union[str, Path]) -> pd.DataFrame:
    """report.csv 或 report.json -> DataFrame（指标为浮点，缺失为 NaN）。"""
    path = Path(path)
    try:
        if path.suffix == ".json":
            rows = json.loads(path.read_text(encoding="utf-8"))
            frame = pd.DataFrame(rows)
            if not frame.empty:
                frame = frame.rename(columns={"n_units": "n"})
            return frame.reindex(columns=list(CSV_COLUMNS))
        return pd.read_csv(path, dtype={"tag": str, "task": str, "note": str, "confusion": str},
                           keep_default_na=False, na_values={m: [""] for m in METRIC_COLUMNS})
    except OSError as e:
        raise StoreIoError(f"Cannot read report {path}: {e}")
