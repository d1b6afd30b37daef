"""
Multitask, slice-aware training against probabilistic labels, and serving.

Per task t the objective is

    loss_weight_t * ( task loss on the slice-combined logits
                      + lambda_ind * sum_s BCE(indicator_s, membership_s)
                      + lambda_exp * sum_e member-masked expert loss )

where the experts e are the base expert (every labeled unit is a member)
plus one expert per slice. Each batch's loss is summed over units and
divided by the number of rows in the batch; plain SGD with a fixed rate.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from WSCompiler.compiler.candidates import ArchChoice
from WSCompiler.compiler.ir import ModelIR, ServingSignature
from WSCompiler.labels.labelmodel import ProbLabels, rebalance_weights
from WSCompiler.labels.matrix import UnitRef
from WSCompiler.numerics.batch import EncodedBatch, encode_batch
from WSCompiler.numerics.engine import Trace, backward, forward
from WSCompiler.numerics.tensor import ParamStore, check_params, init_params
from WSCompiler.schema.schema import PayloadKind, Schema, TaskDecl, TaskKind, schema_hash, sequence_aggregators
from WSCompiler.store.codec import Record, parse_record
from WSCompiler.store.rowstore import RowStore
from WSCompiler.training.losses import binary_cross_entropy, softmax_cross_entropy
from WSCompiler.utils.config import TrainDefaults
from WSCompiler.utils.errors import (
    EmptyCandidateSet, EmptyTrainSet, MissingPayload, NonFiniteError, RecordValidationError, ShapeError
)
from WSCompiler.utils.hashing import sha256_bytes
from WSCompiler.utils.logger import get_logger

logger = get_logger(__name__)

PREDICT_BATCH = 256
PROB_TOLERANCE = 1e-9


class TrainConfig(BaseModel):
    learning_rate: float = Field(default=0.1, gt=0, description="SGD step size")
    epochs: int = Field(default=10, ge=1, description="Passes over the train rows")
    batch_size: int = Field(default=32, ge=1, description="Rows per mini-batch")
    slice_indicator_weight: float = Field(default=1.0, ge=0.0, description="lambda_ind")
    slice_expert_weight: float = Field(default=1.0, ge=0.0, description="lambda_exp")
    rebalance: bool = Field(default=True, description="Rebalance classes in the task loss")
    seed: int = Field(default=0, ge=0, description="Initialization and shuffle seed")

    @classmethod
    def from_choice(cls, choice: ArchChoice, defaults: Optional[TrainDefaults] = None, seed: int = 0) -> "TrainConfig":
        defaults = defaults or TrainDefaults()
        return cls(
            learning_rate=choice.learning_rate,
            epochs=choice.epochs,
            batch_size=choice.batch_size,
            slice_indicator_weight=defaults.slice_indicator_weight,
            slice_expert_weight=defaults.slice_expert_weight,
            rebalance=defaults.rebalance,
            seed=seed
        )


@dataclass
class EpochLog:
    epoch: int
    total_loss: float
    task_losses: Dict[str, float] = field(default_factory=dict)


@dataclass
class TrainedModel:
    ir: ModelIR
    params: ParamStore
    signature: ServingSignature
    provenance: Dict[str, Any] = field(default_factory=dict)
    train_log: List[EpochLog] = field(default_factory=list)

    @property
    def schema(self) -> Schema:
        return self.ir.schema


# ---------- targets ----------

@dataclass
class _TaskTargets:
    decl: TaskDecl
    per_token: bool
    by_row: Dict[int, List[Tuple[UnitRef, np.ndarray, float]]]


def _unit_weights(labels: ProbLabels, kind: TaskKind, rebalance: bool) -> np.ndarray:
    if rebalance and kind != TaskKind.SELECT:
        return rebalance_weights(labels)
    return (~labels.abstained()).astype(np.float64)


def _prepare_targets(schema: Schema, labels: Dict[str, ProbLabels], rows: Sequence[int],
                     rebalance: bool) -> Dict[str, _TaskTargets]:
    keep = set(rows)
    targets: Dict[str, _TaskTargets] = {}
    for t in schema.tasks:
        if t.name not in labels:
            continue
        task_labels = labels[t.name].subset(keep)
        weights = _unit_weights(task_labels, t.kind, rebalance)
        by_row: Dict[int, List[Tuple[UnitRef, np.ndarray, float]]] = {}
        for unit, probs, w in zip(task_labels.units, task_labels.probs, weights):
            if probs is not None and w > 0:
                by_row.setdefault(unit.row, []).append((unit, probs, float(w)))
        per_token = schema.payload(t.payload).kind == PayloadKind.SEQUENCE
        targets[t.name] = _TaskTargets(t, per_token, by_row)
    unknown = sorted(set(labels) - {t.name for t in schema.tasks})
    if unknown:
        logger.warning("labels for unknown tasks ignored: %s", unknown)
    return targets


def _batch_targets(task: _TaskTargets, batch: EncodedBatch, shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    kind = task.decl.kind
    targets = np.zeros(shape)
    weights = np.zeros(shape if kind == TaskKind.BITVECTOR else shape[:-1])
    for i, row in enumerate(batch.rows):
        for unit, probs, w in task.by_row.get(row, []):
            if kind == TaskKind.SELECT:
                targets[i, :probs.size] = probs
                weights[i] = w
                continue
            idx = (i,) if unit.token is None else (i, unit.token)
            if kind == TaskKind.MULTICLASS:
                targets[idx] = probs
                weights[idx] = w
            else:
                targets[idx + (unit.bit,)] = probs[1]
                weights[idx + (unit.bit,)] = w
    return targets, weights


def _unit_mask(task: _TaskTargets, batch: EncodedBatch) -> np.ndarray:
    if task.per_token:
        return batch.masks[task.decl.payload].astype(np.float64)
    return np.ones(batch.size)


def _broadcast_rows(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def _head_loss(kind: TaskKind, logits: np.ndarray, targets: np.ndarray, weights: np.ndarray,
               mask: Optional[np.ndarray]) -> Tuple[float, np.ndarray]:
    if kind == TaskKind.BITVECTOR:
        return binary_cross_entropy(logits, targets, weights)
    return softmax_cross_entropy(logits, targets, weights, mask)


def _add_seed(seeds: Dict[str, np.ndarray], node_id: str, grad: np.ndarray) -> None:
    seeds[node_id] = seeds[node_id] + grad if node_id in seeds else grad


def batch_loss(ir: ModelIR, trace: Trace, targets: Dict[str, _TaskTargets],
               cfg: TrainConfig) -> Tuple[float, Dict[str, float], Dict[str, np.ndarray]]:
    """Loss of one batch (already divided by its row count) and the seed gradients."""
    batch = trace.batch
    scale = 1.0 / batch.size
    seeds: Dict[str, np.ndarray] = {}
    per_task: Dict[str, float] = {}
    for name in ir.task_logits:
        task = targets.get(name)
        if task is None or task.decl.loss_weight == 0:
            continue
        kind = task.decl.kind
        w_t = task.decl.loss_weight * scale
        logits_id = ir.task_logits[name]
        mask = batch.axis_mask(ir.node(logits_id).attrs["axis"]) if kind == TaskKind.SELECT else None
        y, w = _batch_targets(task, batch, trace[logits_id].shape)

        loss, grad = _head_loss(kind, trace[logits_id], y, w, mask)
        total = loss
        _add_seed(seeds, logits_id, w_t * grad)

        units = _unit_mask(task, batch)
        for block in ir.slice_blocks.get(name, ()):
            if block.tag is None:
                member = np.ones(batch.size)
            else:
                member = batch.membership(block.tag)
                if cfg.slice_indicator_weight > 0:
                    ind = trace[block.indicator_logit][..., 0]
                    ind_loss, ind_grad = binary_cross_entropy(ind, _broadcast_rows(member, ind) * np.ones_like(ind),
                                                              units)
                    total += cfg.slice_indicator_weight * ind_loss
                    _add_seed(seeds, block.indicator_logit,
                              (w_t * cfg.slice_indicator_weight * ind_grad)[..., None])
            if cfg.slice_expert_weight > 0:
                expert_w = w * _broadcast_rows(member, w)
                exp_loss, exp_grad = _head_loss(kind, trace[block.expert_logits], y, expert_w, mask)
                total += cfg.slice_expert_weight * exp_loss
                _add_seed(seeds, block.expert_logits, w_t * cfg.slice_expert_weight * exp_grad)

        per_task[name] = w_t * total
    return float(sum(per_task.values())), per_task, seeds


# ---------- training ----------

def _resolved_choice(ir: ModelIR) -> Dict[str, Any]:
    return ArchChoice(values=dict(ir.choice)).resolved(sequence_aggregators(ir.schema))


def train(ir: ModelIR, store: RowStore, labels: Dict[str, ProbLabels], cfg: TrainConfig,
          rows: Optional[Sequence[int]] = None, label_digests: Optional[Dict[str, str]] = None) -> TrainedModel:
    schema = ir.schema
    train_rows = list(store.rows_with_tag("train") if rows is None else rows)
    if not train_rows:
        raise EmptyTrainSet("no train rows to fit on")
    targets = _prepare_targets(schema, labels, train_rows, cfg.rebalance)
    if not targets:
        raise EmptyTrainSet("no task has labels to train on")

    records = dict(store.records(train_rows))
    params = init_params(ir, cfg.seed)
    log: List[EpochLog] = []
    batch_id = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_rows))
        epoch_total = 0.0
        epoch_tasks = {name: 0.0 for name in targets}
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_rows[i] for i in order[start:start + cfg.batch_size]]
            batch = encode_batch(schema, [records[r] for r in chunk], chunk)
            try:
                trace = forward(ir, params, batch)
                loss, per_task, seeds = batch_loss(ir, trace, targets, cfg)
                if not np.isfinite(loss):
                    raise NonFiniteError("batch loss is not finite")
                grads = backward(ir, trace, seeds)
            except NonFiniteError as e:
                raise NonFiniteError(f"epoch {epoch}: {e}", batch_id=batch_id)

            # SGD
            for name, g in grads.items():
                params.tensors[name] -= cfg.learning_rate * g
            epoch_total += loss * len(chunk)
            for name, value in per_task.items():
                epoch_tasks[name] += value * len(chunk)
            batch_id += 1

        entry = EpochLog(
            epoch=epoch,
            total_loss=epoch_total / len(train_rows),
            task_losses={k: v / len(train_rows) for k, v in epoch_tasks.items()}
        )
        log.append(entry)
        logger.debug("epoch %d loss %.6f", epoch, entry.total_loss)

    provenance = {
        "schema_hash": f"{schema_hash(schema):016x}",
        "store_digest": store.digest,
        "ir_digest": sha256_bytes(ir.to_json().encode("utf-8")),
        "choice": _resolved_choice(ir),
        "seeds": {"init": cfg.seed, "shuffle": cfg.seed},
        "train_config": cfg.model_dump(),
        "train_rows": len(train_rows),
        "label_digests": dict(sorted((label_digests or {}).items()))
    }
    logger.info("trained %d epochs on %d rows, final loss %.6f", cfg.epochs, len(train_rows), log[-1].total_loss)
    return TrainedModel(ir=ir, params=params, signature=ir.signature, provenance=provenance, train_log=log)


# ---------- serving ----------

def prepare_input(model: TrainedModel, obj: Any) -> Record:
    """Check the fields the signature requires, then validate like ingest does."""
    if not isinstance(obj, dict):
        raise RecordValidationError("BadRecord", "a record must be a JSON object")
    for task in model.signature.tasks:
        for name in task.inputs:
            if name not in obj:
                raise MissingPayload(name)
    return parse_record(model.schema, obj)


def _run(model: TrainedModel, records: Sequence[Record], rows: Optional[Sequence[int]] = None) -> Trace:
    batch = encode_batch(model.schema, records, rows)
    return forward(model.ir, model.params, batch)


def _named(values: np.ndarray, names: Sequence[str]) -> Dict[str, float]:
    return {n: float(v) for n, v in zip(names, values)}


def _decode_task(model: TrainedModel, task: TaskDecl, record: Record, out: np.ndarray) -> Any:
    if task.kind == TaskKind.SELECT:
        candidates = record.payloads.get(task.select) or []
        if not candidates:
            raise EmptyCandidateSet(task.name, task.select)
        probs = out[:len(candidates)]
        return [{"id": c["id"], "probability": float(p)} for c, p in zip(candidates, probs)]
    if model.schema.payload(task.payload).kind == PayloadKind.SEQUENCE:
        tokens = record.payloads.get(task.payload) or []
        return [_named(out[t], task.labels) for t in range(len(tokens))]
    return _named(out, task.labels)


def predict_records(model: TrainedModel, records: Sequence[Record]) -> List[Dict[str, Any]]:
    schema = model.schema
    results: List[Dict[str, Any]] = []
    for start in range(0, len(records), PREDICT_BATCH):
        chunk = list(records[start:start + PREDICT_BATCH])
        trace = _run(model, chunk)
        for i, record in enumerate(chunk):
            results.append({
                t.name: _decode_task(model, t, record, trace[model.ir.task_outputs[t.name]][i])
                for t in schema.tasks
            })
    return results


def predict(model: TrainedModel, record: Record) -> Dict[str, Any]:
    prediction = predict_records(model, [record])[0]
    validate_prediction(model.signature, prediction)
    return prediction


def predict_units(model: TrainedModel, store: RowStore, rows: Sequence[int]) -> Dict[str, Dict[UnitRef, int]]:
    """Hard predictions keyed like the label matrix units (Bitvector bits are 0/1)."""
    schema = model.schema
    result: Dict[str, Dict[UnitRef, int]] = {t.name: {} for t in schema.tasks}
    rows = list(rows)
    for start in range(0, len(rows), PREDICT_BATCH):
        chunk = rows[start:start + PREDICT_BATCH]
        records = [store.get(r) for r in chunk]
        trace = _run(model, records, chunk)
        for t in schema.tasks:
            out = trace[model.ir.task_outputs[t.name]]
            per_token = schema.payload(t.payload).kind == PayloadKind.SEQUENCE
            units = result[t.name]
            for i, (row, record) in enumerate(zip(chunk, records)):
                if t.kind == TaskKind.SELECT:
                    n = len(record.payloads.get(t.select) or [])
                    if n:
                        units[UnitRef(row)] = int(np.argmax(out[i, :n]))
                    continue
                positions = range(len(record.payloads.get(t.payload) or [])) if per_token else [None]
                for tok in positions:
                    values = out[i] if tok is None else out[i, tok]
                    if t.kind == TaskKind.MULTICLASS:
                        units[UnitRef(row, tok)] = int(np.argmax(values))
                    else:
                        for b in range(len(t.labels)):
                            units[UnitRef(row, tok, b)] = int(values[b] > 0.5)
    return result


def _check_distribution(task: str, probs: Sequence[float]) -> None:
    if any(p < 0 or p > 1 for p in probs):
        raise ShapeError(f"task '{task}': probabilities outside [0, 1]")
    if probs and abs(sum(probs) - 1.0) > PROB_TOLERANCE:
        raise ShapeError(f"task '{task}': distribution sums to {sum(probs)}")


def validate_prediction(signature: ServingSignature, prediction: Dict[str, Any]) -> None:
    names = [t.name for t in signature.tasks]
    if sorted(prediction) != sorted(names):
        raise ShapeError(f"prediction covers {sorted(prediction)}, signature lists {sorted(names)}")
    for t in signature.tasks:
        value = prediction[t.name]
        if t.kind == TaskKind.SELECT.value:
            if not isinstance(value, list) or not all(set(c) == {"id", "probability"} for c in value):
                raise ShapeError(f"task '{t.name}': expected a list of candidates")
            _check_distribution(t.name, [c["probability"] for c in value])
            continue
        targets = value if t.granularity == PayloadKind.SEQUENCE.value else [value]
        if not isinstance(targets, list):
            raise ShapeError(f"task '{t.name}': expected one entry per token")
        for entry in targets:
            if not isinstance(entry, dict) or tuple(entry) != tuple(t.labels):
                raise ShapeError(f"task '{t.name}': outputs must be keyed by {list(t.labels)}")
            if t.kind == TaskKind.MULTICLASS.value:
                _check_distribution(t.name, list(entry.values()))
            elif any(p < 0 or p > 1 for p in entry.values()):
                raise ShapeError(f"task '{t.name}': bit probabilities outside [0, 1]")
