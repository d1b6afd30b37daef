"""
Model IR: a topologically ordered dataflow graph plus its parameters.

Shapes are symbolic tuples. "B" is the batch axis, "L:<payload>" is the
padded length axis of a sequence or set payload, integers are fixed dims.
"""

import json
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

from WSCompiler.schema.schema import Schema, parse_schema, schema_to_document
from WSCompiler.utils.hashing import canonical_json

IR_VERSION = 1
SIG_VERSION = 1

Dim = Union[int, str]
BATCH = "B"


def length_axis(payload: str) -> str:
    return f"L:{payload}"


class OpKind(str, Enum):
    EMBED_LOOKUP = "EmbedLookup"
    MEAN_POOL = "MeanPool"
    MAX_POOL = "MaxPool"
    CONV1D = "Conv1D"
    RECURRENT = "Recurrent"
    SPAN_POOL = "SpanPool"
    CONCAT = "Concat"
    LINEAR = "Linear"
    RELU = "Relu"
    SOFTMAX = "Softmax"
    SIGMOID = "Sigmoid"
    CANDIDATE_SCORE = "CandidateScore"
    SLICE_COMBINE = "SliceCombine"


class Initializer(str, Enum):
    GLOROT = "glorot_uniform"
    ZEROS = "zeros"


class ParamSpec(BaseModel):
    model_config = ConfigDict(frozen=True)
    name: str
    shape: Tuple[int, ...]
    init: Initializer
    fan_in: int = 0
    fan_out: int = 0

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


class IRNode(BaseModel):
    model_config = ConfigDict(frozen=True)
    id: str
    op: OpKind
    inputs: Tuple[str, ...] = ()
    shape: Tuple[Dim, ...]
    params: Tuple[str, ...] = ()
    attrs: Dict[str, Any] = Field(default_factory=dict)


class SliceBlock(BaseModel):
    """Heads one slice adds to one task. The base expert has tag None."""
    model_config = ConfigDict(frozen=True)
    tag: Optional[str]
    indicator_logit: Optional[str]
    indicator: Optional[str]
    expert_repr: str
    expert_logits: str


class TaskSignature(BaseModel):
    model_config = ConfigDict(frozen=True)
    name: str
    kind: str
    payload: str
    granularity: str                 # singleton | sequence
    labels: Tuple[str, ...] = ()     # Multiclass 标签或 Bitvector 位名
    candidates: Optional[str] = None  # Select 的候选集合 payload
    inputs: Tuple[str, ...]          # 必需的记录字段
    output: str


class ServingSignature(BaseModel):
    model_config = ConfigDict(frozen=True)
    sig_version: int = SIG_VERSION
    tasks: Tuple[TaskSignature, ...]

    def task(self, name: str) -> TaskSignature:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ServingSignature":
        return cls.model_validate(json.loads(text))


class ModelIR(BaseModel):
    model_config = ConfigDict(frozen=True)
    schema_doc: Dict[str, Any]
    choice: Dict[str, Any]
    nodes: Tuple[IRNode, ...]
    params: Tuple[ParamSpec, ...]
    task_outputs: Dict[str, str]
    task_logits: Dict[str, str]
    slice_blocks: Dict[str, Tuple[SliceBlock, ...]] = Field(default_factory=dict)
    signature: ServingSignature

    @property
    def schema(self) -> Schema:
        return _schema_from_doc(canonical_json(self.schema_doc))

    def node(self, node_id: str) -> IRNode:
        return self.node_index()[node_id]

    def node_index(self) -> Dict[str, IRNode]:
        return {n.id: n for n in self.nodes}

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_json(self) -> str:
        doc = self.model_dump(mode="json")
        doc["ir_version"] = IR_VERSION
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelIR":
        doc = json.loads(text)
        doc.pop("ir_version", None)
        return cls.model_validate(doc)


_SCHEMA_CACHE: Dict[str, Schema] = {}


def _schema_from_doc(key: str) -> Schema:
    schema = _SCHEMA_CACHE.get(key)
    if schema is None:
        schema = parse_schema(key)
        _SCHEMA_CACHE[key] = schema
    return schema


def schema_document(schema: Schema) -> Dict[str, Any]:
    return json.loads(canonical_json(schema_to_document(schema)))
