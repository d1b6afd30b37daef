from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from WSCompiler.schema.schema import PayloadKind, Schema, TaskDecl, TaskKind
from WSCompiler.store.codec import Record, validate_vote
from WSCompiler.store.rowstore import RowStore
from WSCompiler.utils.errors import GranularityMismatch, RecordValidationError

ABSTAIN = -1


class UnitRef(NamedTuple):
    row: int
    token: Optional[int] = None
    bit: Optional[int] = None


@dataclass
class LabelMatrix:
    task: str
    kind: TaskKind
    units: List[UnitRef]
    cardinality: np.ndarray  # (n_units,) 每个单元的类别数
    sources: List[str]       # 排序后的来源名
    votes: np.ndarray        # (n_units, n_sources)，ABSTAIN 表示弃权

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def max_cardinality(self) -> int:
        return int(self.cardinality.max()) if self.n_units else 0

    def unit_votes(self, i: int) -> Dict[str, int]:
        return {s: int(v) for s, v in zip(self.sources, self.votes[i]) if v != ABSTAIN}

    def voted_mask(self) -> np.ndarray:
        if not self.sources:
            return np.zeros(self.n_units, dtype=bool)
        return (self.votes != ABSTAIN).any(axis=1)


def _unit_targets(schema: Schema, task: TaskDecl, record: Record, row: int) -> List[tuple]:
    """(UnitRef, cardinality) for every prediction target of the record."""
    kind = schema.payload(task.payload).kind
    if task.kind == TaskKind.SELECT:
        candidates = record.payloads.get(task.select) or []
        return [(UnitRef(row), len(candidates))] if candidates else []
    positions: List[Optional[int]] = [None]
    if kind == PayloadKind.SEQUENCE:
        tokens = record.payloads.get(task.payload)
        positions = list(range(len(tokens))) if tokens else []
    if task.kind == TaskKind.MULTICLASS:
        return [(UnitRef(row, t), len(task.labels)) for t in positions]
    return [(UnitRef(row, t, b), 2) for t in positions for b in range(len(task.labels))]


def _vote_classes(task: TaskDecl, kind: PayloadKind, value, record: Record) -> Dict[UnitRef, int]:
    """将一个来源的投票展开成 {(token, bit): 类别}，键里的 row 填 0。"""
    if task.kind == TaskKind.SELECT:
        if isinstance(value, str):
            ids = [c["id"] for c in record.payloads[task.select]]
            value = ids.index(value)
        return {UnitRef(0): value}

    per_token = list(enumerate(value)) if kind == PayloadKind.SEQUENCE else [(None, value)]
    classes: Dict[UnitRef, int] = {}
    for t, entry in per_token:
        if entry is None:
            continue
        if task.kind == TaskKind.MULTICLASS:
            classes[UnitRef(0, t)] = task.labels.index(entry)
        else:
            on = set(entry)
            for b, bit in enumerate(task.labels):
                classes[UnitRef(0, t, b)] = int(bit in on)
    return classes


def build_label_matrix(store: RowStore, schema: Schema, task_name: str, rows: Sequence[int]) -> LabelMatrix:
    task = schema.task(task_name)
    kind = schema.payload(task.payload).kind

    units: List[UnitRef] = []
    cardinality: List[int] = []
    unit_votes: List[Dict[str, int]] = []
    sources = set()
    for row, record in store.records(rows):
        targets = _unit_targets(schema, task, record, row)
        index = {}
        for ref, k in targets:
            index[ref._replace(row=0)] = len(units)
            units.append(ref)
            cardinality.append(k)
            unit_votes.append({})
        for vote in record.supervision.get(task_name, []):
            try:
                validate_vote(schema, task, vote.value, record.payloads, f"row {row}")
            except RecordValidationError as e:
                raise GranularityMismatch(f"task '{task_name}', row {row}, source '{vote.source}': {e.message}")
            for key, cls in _vote_classes(task, kind, vote.value, record).items():
                unit_votes[index[key]][vote.source] = cls
                sources.add(vote.source)

    ordered = sorted(sources)
    column = {s: j for j, s in enumerate(ordered)}
    votes = np.full((len(units), len(ordered)), ABSTAIN, dtype=np.int64)
    for i, by_source in enumerate(unit_votes):
        for s, cls in by_source.items():
            votes[i, column[s]] = cls

    return LabelMatrix(
        task=task_name,
        kind=task.kind,
        units=units,
        cardinality=np.asarray(cardinality, dtype=np.int64),
        sources=ordered,
        votes=votes
    )
