"""Record validation against a schema, and the canonical row encoding."""

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from WSCompiler.schema.schema import (
    RESERVED_TAGS, PayloadKind, Schema, TaskDecl, TaskKind, reference_order
)
from WSCompiler.utils.errors import RecordValidationError
from WSCompiler.utils.hashing import canonical_bytes, fnv1a64

SUPERVISION_KEY = "supervision"
TAGS_KEY = "tags"


@dataclass(frozen=True)
class LabeledVote:
    source: str
    value: Any


@dataclass
class Record:
    payloads: Dict[str, Any]
    supervision: Dict[str, List[LabeledVote]] = field(default_factory=dict)
    tags: List[str] = field(default_factory=list)

    def to_document(self) -> dict:
        return {
            "payloads": self.payloads,
            "supervision": {
                task: [{"source": v.source, "value": v.value} for v in votes]
                for task, votes in self.supervision.items()
            },
            "tags": list(self.tags)
        }

    @classmethod
    def from_document(cls, doc: dict) -> "Record":
        return cls(
            payloads=dict(doc["payloads"]),
            supervision={
                task: [LabeledVote(v["source"], v["value"]) for v in votes]
                for task, votes in doc["supervision"].items()
            },
            tags=list(doc["tags"])
        )

    def split(self) -> Optional[str]:
        for tag in self.tags:
            if tag in RESERVED_TAGS:
                return tag
        return None


@dataclass(frozen=True)
class RecordError:
    line: int
    kind: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.kind}: {self.message}"


def encode_record(record: Record) -> bytes:
    return canonical_bytes(record.to_document())


def decode_record(data: bytes) -> Record:
    return Record.from_document(json.loads(data.decode("utf-8")))


def assign_split(record: Record) -> str:
    # 记录规范字节的哈希 -> 80/10/10
    bucket = fnv1a64(encode_record(record)) % 10
    if bucket < 8:
        return "train"
    return "dev" if bucket == 8 else "test"


def _bad(kind: str, message: str):
    raise RecordValidationError(kind, message)


def _is_index(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _validate_span(span: Any, seq: Optional[list], where: str) -> Optional[list]:
    if span is None:
        return None
    if not (isinstance(span, list) and len(span) == 2 and all(_is_index(x) for x in span)):
        _bad("BadSpan", f"{where}: span must be [start, end]")
    if seq is None:
        _bad("BadSpan", f"{where}: span points into a null sequence")
    start, end = span
    if not (0 <= start < end <= len(seq)):
        _bad("BadSpan", f"{where}: span {span} outside 0 <= start < end <= {len(seq)}")
    return [start, end]


def _validate_payloads(schema: Schema, obj: dict) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for name in reference_order(schema):
        p = schema.payload(name)
        raw = obj.get(p.value_key)
        if raw is None:
            values[name] = None
            continue
        if p.kind == PayloadKind.SINGLETON:
            if not isinstance(raw, str):
                _bad("BadValue", f"payload '{name}' must be a string or null")
            values[name] = raw
        elif p.kind == PayloadKind.SEQUENCE:
            if not (isinstance(raw, list) and all(isinstance(t, str) for t in raw)):
                _bad("BadValue", f"payload '{name}' must be a list of strings or null")
            values[name] = list(raw)
        else:
            if not isinstance(raw, list):
                _bad("BadValue", f"payload '{name}' must be a list of elements or null")
            span_refs = [r for r in p.refs if r.span_field is not None]
            allowed = {"id"} | {r.span_field for r in span_refs}
            elements = []
            for i, element in enumerate(raw):
                where = f"{name}[{i}]"
                if not isinstance(element, dict) or not isinstance(element.get("id"), str):
                    _bad("BadValue", f"{where}: element needs a string 'id'")
                extra = set(element) - allowed
                if extra:
                    _bad("BadValue", f"{where}: unknown element keys {sorted(extra)}")
                normalized = {"id": element["id"]}
                for ref in span_refs:
                    normalized[ref.span_field] = _validate_span(element.get(ref.span_field), values.get(ref.payload), where)
                elements.append(normalized)
            values[name] = elements
    return values


def _check_label(task: TaskDecl, label: Any, where: str) -> None:
    if not isinstance(label, str):
        _bad("GranularityMismatch", f"{where}: expected a label, got {label!r}")
    if label not in task.labels:
        _bad("BadVote", f"{where}: '{label}' is not a label of task '{task.name}'")


def _check_bits(task: TaskDecl, bits: Any, where: str) -> None:
    if not (isinstance(bits, list) and all(isinstance(b, str) for b in bits)):
        _bad("GranularityMismatch", f"{where}: expected a list of bit names, got {bits!r}")
    if len(set(bits)) != len(bits):
        _bad("BadVote", f"{where}: repeated bit names")
    for b in bits:
        if b not in task.labels:
            _bad("BadVote", f"{where}: '{b}' is not a bit of task '{task.name}'")


def validate_vote(schema: Schema, task: TaskDecl, value: Any, payloads: Dict[str, Any], where: str) -> None:
    kind = schema.payload(task.payload).kind
    if task.kind == TaskKind.SELECT:
        candidates = payloads.get(task.select) or []
        if not candidates:
            _bad("GranularityMismatch", f"{where}: task '{task.name}' has no candidates in '{task.select}'")
        if _is_index(value):
            if not 0 <= value < len(candidates):
                _bad("BadVote", f"{where}: candidate index {value} out of range")
        elif isinstance(value, str):
            if value not in [c["id"] for c in candidates]:
                _bad("BadVote", f"{where}: no candidate with id '{value}'")
        else:
            _bad("GranularityMismatch", f"{where}: select votes are a candidate index or id")
        return

    check_one = _check_label if task.kind == TaskKind.MULTICLASS else _check_bits
    if kind == PayloadKind.SINGLETON:
        check_one(task, value, where)
        return
    tokens = payloads.get(task.payload)
    if tokens is None:
        _bad("GranularityMismatch", f"{where}: per-token vote on a null sequence")
    if not isinstance(value, list) or len(value) != len(tokens):
        _bad("GranularityMismatch", f"{where}: per-token votes must have {len(tokens)} entries")
    for i, entry in enumerate(value):
        if entry is not None:
            check_one(task, entry, f"{where}[{i}]")


def _validate_supervision(schema: Schema, obj: Any, payloads: Dict[str, Any]) -> Dict[str, List[LabeledVote]]:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        _bad("BadValue", "supervision must be an object")
    supervision: Dict[str, List[LabeledVote]] = {}
    for task_name, votes in obj.items():
        if not schema.has_task(task_name):
            _bad("UnknownTask", f"unknown task '{task_name}'")
        task = schema.task(task_name)
        if not isinstance(votes, list):
            _bad("BadValue", f"supervision.{task_name} must be a list")
        seen = set()
        parsed = []
        for i, vote in enumerate(votes):
            where = f"supervision.{task_name}[{i}]"
            if not (isinstance(vote, dict) and set(vote) == {"source", "value"} and isinstance(vote["source"], str)):
                _bad("BadValue", f"{where}: expected {{'source': str, 'value': ...}}")
            if vote["source"] in seen:
                _bad("DuplicateSource", f"{where}: source '{vote['source']}' votes twice on '{task_name}'")
            seen.add(vote["source"])
            validate_vote(schema, task, vote["value"], payloads, where)
            parsed.append(LabeledVote(vote["source"], vote["value"]))
        supervision[task_name] = parsed
    return supervision


def _validate_tags(obj: Any) -> List[str]:
    if obj is None:
        return []
    if not (isinstance(obj, list) and all(isinstance(t, str) and t for t in obj)):
        _bad("BadValue", "tags must be a list of nonempty strings")
    tags: List[str] = []
    for t in obj:
        if t not in tags:
            tags.append(t)
    if sum(t in RESERVED_TAGS for t in tags) > 1:
        _bad("MultipleSplits", f"record carries more than one of {list(RESERVED_TAGS)}")
    return tags


def parse_record(schema: Schema, obj: Any) -> Record:
    """JSON 对象 -> 校验后的 Record（缺少 train/dev/test 时按哈希分配）。"""
    if not isinstance(obj, dict):
        _bad("BadRecord", "a record must be a JSON object")
    known = {p.value_key for p in schema.payloads} | {SUPERVISION_KEY, TAGS_KEY}
    unknown = sorted(set(obj) - known)
    if unknown:
        _bad("UnknownField", f"unknown record keys {unknown}")

    payloads = _validate_payloads(schema, obj)
    record = Record(
        payloads=payloads,
        supervision=_validate_supervision(schema, obj.get(SUPERVISION_KEY), payloads),
        tags=_validate_tags(obj.get(TAGS_KEY))
    )
    if record.split() is None:
        record.tags.append(assign_split(record))
    return record


def parse_record_line(schema: Schema, line: bytes) -> Record:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as e:
        raise RecordValidationError("BadJson", str(e))
    return parse_record(schema, obj)
