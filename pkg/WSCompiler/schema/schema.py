"""
Declarative schema: payloads, tasks, slices and the tuning specification.

The schema says *what* the model computes (inputs, prediction targets,
subsets that deserve extra capacity), never *how*. Architecture and
hyperparameters only appear in the tuning block, as a search space.
"""

import json
import math
import re
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

from WSCompiler.utils.errors import SchemaSyntaxError, SchemaValidationError, StoreIoError, ValidationKind
from WSCompiler.utils.hashing import fnv1a64

RESERVED_TAGS = ("train", "test", "dev")
U64_MAX = (1 << 64) - 1
_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


class PayloadKind(str, Enum):
    SINGLETON = "singleton"
    SEQUENCE = "sequence"
    SET = "set"


class TaskKind(str, Enum):
    MULTICLASS = "multiclass"
    BITVECTOR = "bitvector"
    SELECT = "select"


class DataField(BaseModel):
    model_config = ConfigDict(frozen=True)
    field: str


class PayloadRef(BaseModel):
    model_config = ConfigDict(frozen=True)
    payload: str
    span_field: Optional[str] = None


PayloadInput = Union[DataField, PayloadRef]


class PayloadDecl(BaseModel):
    model_config = ConfigDict(frozen=True)
    name: str
    kind: PayloadKind
    inputs: Tuple[PayloadInput, ...]
    embed_dim: Union[int, str] = "auto"

    @property
    def data_fields(self) -> List[DataField]:
        return [i for i in self.inputs if isinstance(i, DataField)]

    @property
    def refs(self) -> List[PayloadRef]:
        return [i for i in self.inputs if isinstance(i, PayloadRef)]

    @property
    def value_key(self) -> str:
        # 记录中存放该 payload 原始值的键
        fields = self.data_fields
        return fields[0].field if fields else self.name


class TaskDecl(BaseModel):
    model_config = ConfigDict(frozen=True)
    name: str
    payload: str
    kind: TaskKind
    labels: Tuple[str, ...] = ()
    select: Optional[str] = None
    loss_weight: float = 1.0


class SliceDecl(BaseModel):
    model_config = ConfigDict(frozen=True)
    tag: str
    tasks: Optional[Tuple[str, ...]] = None


class TuningSpec(BaseModel):
    model_config = ConfigDict(frozen=True)
    search_space: Dict[str, Tuple[Any, ...]] = Field(default_factory=dict)
    pinned: Dict[str, Any] = Field(default_factory=dict)
    budget: int = 1
    seed: int = 0

    @property
    def effective_space(self) -> Dict[str, Tuple[Any, ...]]:
        return {k: v for k, v in self.search_space.items() if k not in self.pinned}


class Schema(BaseModel):
    model_config = ConfigDict(frozen=True)
    payloads: Tuple[PayloadDecl, ...]
    tasks: Tuple[TaskDecl, ...]
    slices: Tuple[SliceDecl, ...] = ()
    tuning: TuningSpec = Field(default_factory=TuningSpec)

    def payload(self, name: str) -> PayloadDecl:
        for p in self.payloads:
            if p.name == name:
                return p
        raise KeyError(name)

    def task(self, name: str) -> TaskDecl:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def has_payload(self, name: str) -> bool:
        return any(p.name == name for p in self.payloads)

    def has_task(self, name: str) -> bool:
        return any(t.name == name for t in self.tasks)

    def slices_for(self, task_name: str) -> List[SliceDecl]:
        """Slices that add capacity to a task; Select tasks only take explicit slices."""
        task = self.task(task_name)
        result = []
        for s in self.slices:
            if s.tasks is None:
                if task.kind != TaskKind.SELECT:
                    result.append(s)
            elif task_name in s.tasks:
                result.append(s)
        return result

    @property
    def slice_tags(self) -> List[str]:
        return [s.tag for s in self.slices]


# ---------------- hyperparameters ----------------

HYPERPARAMETER_KEYS = ("encoder", "embed_dim", "hidden_dim", "learning_rate", "epochs", "batch_size")
ENCODER_KINDS = ("mean_pool", "max_pool", "recurrent")


def parse_encoder(value: Any) -> Tuple[str, int]:
    """'mean_pool' | 'max_pool' | 'recurrent' | 'conv1d:<w>' -> (kind, width)."""
    if not isinstance(value, str):
        raise ValueError(f"encoder must be a string, got {value!r}")
    if value in ENCODER_KINDS:
        return value, 0
    if value.startswith("conv1d:"):
        try:
            width = int(value.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad conv1d width in {value!r}")
        if width < 1 or width > 7 or width % 2 == 0:
            raise ValueError(f"conv1d width must be odd and in [1, 7], got {width}")
        return "conv1d", width
    raise ValueError(f"unknown encoder {value!r}")


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_finite_number(value: Any) -> bool:
    if not (_is_int(value) or isinstance(value, float)):
        return False
    try:
        return math.isfinite(value)
    except OverflowError:  # 超大的 JSON 整数
        return False


def check_hyperparameter(key: str, value: Any) -> None:
    base = key.split(".", 1)[0]
    if base == "encoder":
        parse_encoder(value)
    elif base in ("embed_dim", "hidden_dim", "epochs", "batch_size"):
        if not _is_int(value) or value < 1:
            raise ValueError(f"{key} must be a positive integer, got {value!r}")
    elif base == "learning_rate":
        if not _is_finite_number(value) or value <= 0:
            raise ValueError(f"learning_rate must be a positive number, got {value!r}")
    else:
        raise ValueError(f"unknown hyperparameter {key!r}")


def sequence_aggregators(schema: Schema) -> List[str]:
    """Payloads whose representation is a searched encoder over a Sequence payload."""
    names = []
    for p in schema.payloads:
        if p.kind != PayloadKind.SINGLETON:
            continue
        for ref in p.refs:
            if schema.has_payload(ref.payload) and schema.payload(ref.payload).kind == PayloadKind.SEQUENCE:
                names.append(p.name)
                break
    return names


# ---------------- parsing ----------------

def _fail(kind: ValidationKind, path: str, message: str = "") -> None:
    raise SchemaValidationError(kind, path, message)


def _check(cond: bool, kind: ValidationKind, path: str, message: str = "") -> None:
    if not cond:
        _fail(kind, path, message)


def _check_keys(obj: dict, allowed: Tuple[str, ...], required: Tuple[str, ...], path: str) -> None:
    for key in required:
        _check(key in obj, ValidationKind.BAD_VALUE, f"{path}.{key}", "missing key")
    for key in obj:
        _check(key in allowed, ValidationKind.BAD_VALUE, f"{path}.{key}", "unknown key")


def _identifier(value: Any, path: str) -> str:
    _check(isinstance(value, str) and bool(_IDENTIFIER.match(value)), ValidationKind.BAD_VALUE, path,
           f"expected an identifier, got {value!r}")
    return value


def _unique_strings(values: Any, path: str) -> Tuple[str, ...]:
    _check(isinstance(values, list), ValidationKind.BAD_VALUE, path, "expected a list")
    _check(len(values) > 0, ValidationKind.EMPTY_LABEL_SET, path, "label set is empty")
    seen = set()
    for i, v in enumerate(values):
        _check(isinstance(v, str) and v != "", ValidationKind.BAD_VALUE, f"{path}[{i}]", "expected a nonempty string")
        _check(v not in seen, ValidationKind.DUPLICATE_NAME, f"{path}[{i}]", f"duplicate entry {v!r}")
        seen.add(v)
    return tuple(values)


def _parse_input(obj: Any, path: str) -> PayloadInput:
    _check(isinstance(obj, dict), ValidationKind.BAD_VALUE, path, "expected an object")
    if "field" in obj:
        _check_keys(obj, ("field",), ("field",), path)
        _check(isinstance(obj["field"], str) and obj["field"] != "", ValidationKind.BAD_VALUE, f"{path}.field")
        return DataField(field=obj["field"])
    _check_keys(obj, ("payload", "span_field"), ("payload",), path)
    _check(isinstance(obj["payload"], str), ValidationKind.BAD_VALUE, f"{path}.payload")
    span = obj.get("span_field")
    _check(span is None or (isinstance(span, str) and span != ""), ValidationKind.BAD_VALUE, f"{path}.span_field")
    return PayloadRef(payload=obj["payload"], span_field=span)


def _parse_payload(obj: Any, path: str) -> PayloadDecl:
    _check(isinstance(obj, dict), ValidationKind.BAD_VALUE, path, "expected an object")
    _check_keys(obj, ("name", "kind", "inputs", "embed_dim"), ("name", "kind", "inputs"), path)
    name = _identifier(obj["name"], f"{path}.name")
    kinds = [k.value for k in PayloadKind]
    _check(obj["kind"] in kinds, ValidationKind.BAD_VALUE, f"{path}.kind", f"expected one of {kinds}")
    inputs = obj["inputs"]
    _check(isinstance(inputs, list) and len(inputs) > 0, ValidationKind.BAD_VALUE, f"{path}.inputs",
           "expected a nonempty list")
    embed_dim = obj.get("embed_dim", "auto")
    _check(embed_dim == "auto" or (_is_int(embed_dim) and embed_dim >= 1), ValidationKind.BAD_VALUE,
           f"{path}.embed_dim", "expected a positive integer or 'auto'")
    return PayloadDecl(
        name=name,
        kind=PayloadKind(obj["kind"]),
        inputs=tuple(_parse_input(x, f"{path}.inputs[{i}]") for i, x in enumerate(inputs)),
        embed_dim=embed_dim
    )


def _parse_task(obj: Any, path: str) -> TaskDecl:
    _check(isinstance(obj, dict), ValidationKind.BAD_VALUE, path, "expected an object")
    _check_keys(obj, ("name", "payload", "kind", "loss_weight"), ("name", "payload", "kind"), path)
    name = _identifier(obj["name"], f"{path}.name")
    _check(isinstance(obj["payload"], str), ValidationKind.BAD_VALUE, f"{path}.payload")
    kind_obj = obj["kind"]
    _check(isinstance(kind_obj, dict) and len(kind_obj) == 1, ValidationKind.BAD_VALUE, f"{path}.kind",
           "expected a single-key object")
    (kind_name, kind_value), = kind_obj.items()
    kinds = [k.value for k in TaskKind]
    _check(kind_name in kinds, ValidationKind.BAD_VALUE, f"{path}.kind", f"expected one of {kinds}")
    weight = obj.get("loss_weight", 1.0)
    _check(_is_finite_number(weight) and weight >= 0,
           ValidationKind.BAD_VALUE, f"{path}.loss_weight", "expected a nonnegative number")

    kind = TaskKind(kind_name)
    labels: Tuple[str, ...] = ()
    select = None
    if kind == TaskKind.SELECT:
        _check(isinstance(kind_value, str), ValidationKind.BAD_VALUE, f"{path}.kind.select", "expected a payload name")
        select = kind_value
    else:
        labels = _unique_strings(kind_value, f"{path}.kind.{kind_name}")
    return TaskDecl(name=name, payload=obj["payload"], kind=kind, labels=labels, select=select,
                    loss_weight=float(weight))


def _parse_slice(obj: Any, path: str) -> SliceDecl:
    _check(isinstance(obj, dict), ValidationKind.BAD_VALUE, path, "expected an object")
    _check_keys(obj, ("tag", "tasks"), ("tag",), path)
    tag = obj["tag"]
    _check(isinstance(tag, str) and tag != "", ValidationKind.BAD_SLICE_TAG, f"{path}.tag", "expected a nonempty tag")
    _check(tag not in RESERVED_TAGS, ValidationKind.BAD_SLICE_TAG, f"{path}.tag", f"'{tag}' is a reserved tag")
    tasks = obj.get("tasks")
    if tasks is not None:
        _check(isinstance(tasks, list) and all(isinstance(t, str) for t in tasks), ValidationKind.BAD_VALUE,
               f"{path}.tasks", "expected a list of task names")
        tasks = tuple(tasks)
    return SliceDecl(tag=tag, tasks=tasks)


def _parse_tuning(obj: Any, path: str) -> TuningSpec:
    _check(isinstance(obj, dict), ValidationKind.BAD_VALUE, path, "expected an object")
    _check_keys(obj, ("search_space", "pinned", "budget", "seed"), (), path)
    space = obj.get("search_space", {})
    pinned = obj.get("pinned", {})
    _check(isinstance(space, dict), ValidationKind.BAD_VALUE, f"{path}.search_space", "expected an object")
    _check(isinstance(pinned, dict), ValidationKind.BAD_VALUE, f"{path}.pinned", "expected an object")
    parsed_space = {}
    for key, values in space.items():
        _check(isinstance(values, list), ValidationKind.BAD_VALUE, f"{path}.search_space.{key}", "expected a list")
        for i, v in enumerate(values):
            try:
                check_hyperparameter(key, v)
            except ValueError as e:
                _fail(ValidationKind.BAD_VALUE, f"{path}.search_space.{key}[{i}]", str(e))
        parsed_space[key] = tuple(values)
    for key, v in pinned.items():
        try:
            check_hyperparameter(key, v)
        except ValueError as e:
            _fail(ValidationKind.BAD_VALUE, f"{path}.pinned.{key}", str(e))
    budget = obj.get("budget", 1)
    _check(_is_int(budget) and budget >= 1, ValidationKind.BAD_VALUE, f"{path}.budget", "budget must be >= 1")
    seed = obj.get("seed", 0)
    _check(_is_int(seed) and 0 <= seed <= U64_MAX, ValidationKind.BAD_VALUE, f"{path}.seed",
           "seed must be a 64-bit unsigned integer")
    return TuningSpec(search_space=parsed_space, pinned=dict(pinned), budget=budget, seed=seed)


def override_tuning(tuning: TuningSpec, seed: Optional[int] = None, budget: Optional[int] = None) -> TuningSpec:
    """Replace seed and/or budget with the same checks the schema file gets."""
    updates = {}
    if seed is not None:
        _check(_is_int(seed) and 0 <= seed <= U64_MAX, ValidationKind.BAD_VALUE, "tuning.seed",
               "seed must be a 64-bit unsigned integer")
        updates["seed"] = seed
    if budget is not None:
        _check(_is_int(budget) and budget >= 1, ValidationKind.BAD_VALUE, "tuning.budget", "budget must be >= 1")
        updates["budget"] = budget
    return tuning.model_copy(update=updates)


def _check_unique(names: List[str], path: str) -> None:
    seen = set()
    for i, n in enumerate(names):
        _check(n not in seen, ValidationKind.DUPLICATE_NAME, f"{path}[{i}]", f"duplicate name {n!r}")
        seen.add(n)


def _check_cross_references(schema: Schema) -> None:
    payload_kinds = {p.name: p.kind for p in schema.payloads}

    for i, p in enumerate(schema.payloads):
        for j, ref in enumerate(p.refs):
            _check(ref.payload in payload_kinds, ValidationKind.UNKNOWN_REF, f"payloads[{i}].inputs[{j}].payload",
                   f"unknown payload {ref.payload!r}")
            if ref.span_field is not None:
                _check(p.kind == PayloadKind.SET and payload_kinds[ref.payload] == PayloadKind.SEQUENCE,
                       ValidationKind.KIND_MISMATCH, f"payloads[{i}].inputs[{j}].span_field",
                       "span references go from a set payload into a sequence payload")

    for i, t in enumerate(schema.tasks):
        _check(t.payload in payload_kinds, ValidationKind.UNKNOWN_REF, f"tasks[{i}].payload",
               f"unknown payload {t.payload!r}")
        kind = payload_kinds[t.payload]
        if t.kind == TaskKind.SELECT:
            _check(t.select in payload_kinds, ValidationKind.UNKNOWN_REF, f"tasks[{i}].kind.select",
                   f"unknown payload {t.select!r}")
            _check(payload_kinds[t.select] == PayloadKind.SET, ValidationKind.KIND_MISMATCH,
                   f"tasks[{i}].kind.select", "select targets a set payload")
            _check(kind == PayloadKind.SINGLETON, ValidationKind.KIND_MISMATCH, f"tasks[{i}].payload",
                   "select scores a singleton payload against the candidates")
        else:
            _check(kind in (PayloadKind.SINGLETON, PayloadKind.SEQUENCE), ValidationKind.KIND_MISMATCH,
                   f"tasks[{i}].payload", f"{t.kind.value} tasks target singleton or sequence payloads")

    task_names = {t.name for t in schema.tasks}
    for i, s in enumerate(schema.slices):
        for j, name in enumerate(s.tasks or ()):
            _check(name in task_names, ValidationKind.UNKNOWN_REF, f"slices[{i}].tasks[{j}]",
                   f"unknown task {name!r}")

    for key in list(schema.tuning.search_space) + list(schema.tuning.pinned):
        if key.startswith("encoder."):
            target = key.split(".", 1)[1]
            _check(target in payload_kinds, ValidationKind.UNKNOWN_REF, f"tuning.{key}", f"unknown payload {target!r}")


def _check_acyclic(schema: Schema) -> None:
    edges = {p.name: [r.payload for r in p.refs] for p in schema.payloads}
    index = {p.name: i for i, p in enumerate(schema.payloads)}
    state: Dict[str, int] = {}  # 1 = 访问中, 2 = 已完成

    def visit(name: str, trail: List[str]) -> None:
        state[name] = 1
        for nxt in edges[name]:
            if state.get(nxt) == 1:
                cycle = " -> ".join(trail + [name, nxt])
                _fail(ValidationKind.CYCLE_DETECTED, f"payloads[{index[name]}].inputs", cycle)
            if state.get(nxt) is None:
                visit(nxt, trail + [name])
        state[name] = 2

    for p in schema.payloads:
        if p.name not in state:
            visit(p.name, [])


def validate_schema(schema: Schema) -> Schema:
    _check(len(schema.tasks) > 0, ValidationKind.BAD_VALUE, "tasks", "at least one task is required")
    _check_unique([p.name for p in schema.payloads], "payloads")
    _check_unique([t.name for t in schema.tasks], "tasks")
    _check_unique([s.tag for s in schema.slices], "slices")
    _check_cross_references(schema)
    _check_acyclic(schema)
    return schema


def _reject_constant(value: str):
    raise ValueError(f"non-finite number {value}")


def parse_schema(text: Union[str, bytes]) -> Schema:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise SchemaSyntaxError(bytes(text)[:e.start].count(b"\n") + 1, "invalid UTF-8")
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise SchemaSyntaxError(e.lineno, e.msg)
    except (ValueError, RecursionError) as e:
        raise SchemaSyntaxError(1, str(e))

    _check(isinstance(doc, dict), ValidationKind.BAD_VALUE, "$", "expected a JSON object")
    _check_keys(doc, ("payloads", "tasks", "slices", "tuning"), ("payloads", "tasks"), "$")
    for key in ("payloads", "tasks", "slices"):
        _check(isinstance(doc.get(key, []), list), ValidationKind.BAD_VALUE, key, "expected a list")

    schema = Schema(
        payloads=tuple(_parse_payload(p, f"payloads[{i}]") for i, p in enumerate(doc["payloads"])),
        tasks=tuple(_parse_task(t, f"tasks[{i}]") for i, t in enumerate(doc["tasks"])),
        slices=tuple(_parse_slice(s, f"slices[{i}]") for i, s in enumerate(doc.get("slices", []))),
        tuning=_parse_tuning(doc.get("tuning", {}), "tuning")
    )
    return validate_schema(schema)


# ---------------- serialization ----------------

def _input_to_document(inp: PayloadInput) -> dict:
    if isinstance(inp, DataField):
        return {"field": inp.field}
    doc = {"payload": inp.payload}
    if inp.span_field is not None:
        doc["span_field"] = inp.span_field
    return doc


def schema_to_document(schema: Schema) -> dict:
    payloads = []
    for p in schema.payloads:
        doc = {"name": p.name, "kind": p.kind.value, "inputs": [_input_to_document(i) for i in p.inputs]}
        if p.embed_dim != "auto":
            doc["embed_dim"] = p.embed_dim
        payloads.append(doc)

    tasks = []
    for t in schema.tasks:
        kind_value = t.select if t.kind == TaskKind.SELECT else list(t.labels)
        doc = {"name": t.name, "payload": t.payload, "kind": {t.kind.value: kind_value}}
        if t.loss_weight != 1.0:
            doc["loss_weight"] = t.loss_weight
        tasks.append(doc)

    slices = []
    for s in schema.slices:
        doc = {"tag": s.tag}
        if s.tasks is not None:
            doc["tasks"] = list(s.tasks)
        slices.append(doc)

    tuning = {
        "search_space": {k: list(v) for k, v in schema.tuning.search_space.items()},
        "pinned": dict(schema.tuning.pinned),
        "budget": schema.tuning.budget,
        "seed": schema.tuning.seed
    }
    return {"payloads": payloads, "tasks": tasks, "slices": slices, "tuning": tuning}


def serialize_schema(schema: Schema) -> str:
    return json.dumps(schema_to_document(schema), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def schema_hash(schema: Schema) -> int:
    return fnv1a64(serialize_schema(schema).encode("utf-8"))


def reference_order(schema: Schema) -> List[str]:
    """拓扑序：被引用的 payload 在前，同层按声明顺序。"""
    deps = {p.name: {r.payload for r in p.refs} for p in schema.payloads}
    placed: List[str] = []
    done = set()
    while len(placed) < len(schema.payloads):
        for p in schema.payloads:
            if p.name not in done and deps[p.name] <= done:
                placed.append(p.name)
                done.add(p.name)
                break
    return placed


def load_schema(path) -> Schema:
    try:
        with open(path, "rb") as f:
            text = f.read()
    except OSError as e:
        raise StoreIoError(f"Cannot read schema {path}: {e}")
    return parse_schema(text)
