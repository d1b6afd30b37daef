"""
Schema + ArchChoice -> ModelIR.

The schema fixes which encoders, heads and slice blocks exist and how they
connect. The ArchChoice only picks encoder kinds and dimensions, so the
serving signature never depends on it.
"""

from typing import Dict, List, Tuple

from WSCompiler.compiler.candidates import ArchChoice
from WSCompiler.compiler.ir import (
    BATCH, Dim, Initializer, IRNode, ModelIR, OpKind, ParamSpec, ServingSignature,
    SliceBlock, TaskSignature, length_axis, schema_document
)
from WSCompiler.schema.schema import (
    DataField, PayloadDecl, PayloadKind, Schema, TaskDecl, TaskKind, reference_order
)
from WSCompiler.utils.errors import ShapeError, UnsupportedCombination
from WSCompiler.utils.hashing import VOCAB_BUCKETS
from WSCompiler.utils.logger import LoggerMixin


class _GraphBuilder:
    def __init__(self):
        self.nodes: List[IRNode] = []
        self.params: List[ParamSpec] = []
        self._shapes: Dict[str, Tuple[Dim, ...]] = {}

    def shape(self, node_id: str) -> Tuple[Dim, ...]:
        return self._shapes[node_id]

    def node(self, node_id: str, op: OpKind, inputs, shape, params=(), **attrs) -> str:
        if node_id in self._shapes:
            raise UnsupportedCombination(f"node id '{node_id}' produced twice")
        self.nodes.append(IRNode(id=node_id, op=op, inputs=tuple(inputs), shape=tuple(shape),
                                 params=tuple(params), attrs=attrs))
        self._shapes[node_id] = tuple(shape)
        return node_id

    def glorot(self, name: str, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> str:
        self.params.append(ParamSpec(name=name, shape=shape, init=Initializer.GLOROT, fan_in=fan_in, fan_out=fan_out))
        return name

    def zeros(self, name: str, shape: Tuple[int, ...]) -> str:
        self.params.append(ParamSpec(name=name, shape=shape, init=Initializer.ZEROS))
        return name

    def linear(self, node_id: str, source: str, d_out: int) -> str:
        shape = self.shape(source)
        d_in = shape[-1]
        w = self.glorot(f"{node_id}.W", (d_in, d_out), d_in, d_out)
        b = self.zeros(f"{node_id}.b", (d_out,))
        return self.node(node_id, OpKind.LINEAR, [source], shape[:-1] + (d_out,), [w, b])

    def relu(self, node_id: str, source: str) -> str:
        return self.node(node_id, OpKind.RELU, [source], self.shape(source))

    def dense(self, prefix: str, source: str, d_out: int) -> str:
        self.linear(f"{prefix}", source, d_out)
        return self.relu(f"{prefix}_relu", prefix)


class ModelCompiler(LoggerMixin):
    def __init__(self, schema: Schema, choice: ArchChoice):
        self.schema = schema
        self.choice = choice
        self.g = _GraphBuilder()
        self.payload_nodes: Dict[str, str] = {}

    def payload_dim(self, p: PayloadDecl) -> int:
        return p.embed_dim if isinstance(p.embed_dim, int) else self.choice.embed_dim

    # ---------- payloads ----------

    def _embed(self, p: PayloadDecl, field: DataField, per_element: bool) -> str:
        d = self.payload_dim(p)
        table = self.g.glorot(f"{p.name}.embedding", (VOCAB_BUCKETS, d), 1, d)
        shape = (BATCH, length_axis(p.name), d) if per_element else (BATCH, d)
        return self.g.node(f"{p.name}/embed", OpKind.EMBED_LOOKUP, [], shape, [table],
                           payload=p.name, field=field.field)

    def _encode_sequence(self, owner: PayloadDecl, seq: str) -> str:
        kind, width = self.choice.encoder_for(owner.name)
        source = self.payload_nodes[seq]
        axis = length_axis(seq)
        d_in = self.g.shape(source)[-1]
        d_out = self.payload_dim(owner)
        prefix = f"{owner.name}/{seq}"
        if kind == "mean_pool":
            return self.g.node(f"{prefix}/mean_pool", OpKind.MEAN_POOL, [source], (BATCH, d_in), axis=axis)
        if kind == "max_pool":
            return self.g.node(f"{prefix}/max_pool", OpKind.MAX_POOL, [source], (BATCH, d_in), axis=axis)
        if kind == "conv1d":
            node_id = f"{prefix}/conv1d"
            kernel = self.g.glorot(f"{node_id}.kernel", (width, d_in, d_out), width * d_in, width * d_out)
            bias = self.g.zeros(f"{node_id}.b", (d_out,))
            self.g.node(node_id, OpKind.CONV1D, [source], (BATCH, axis, d_out), [kernel, bias],
                        axis=axis, width=width)
            self.g.relu(f"{node_id}_relu", node_id)
            return self.g.node(f"{prefix}/max_pool", OpKind.MAX_POOL, [f"{node_id}_relu"], (BATCH, d_out), axis=axis)
        node_id = f"{prefix}/recurrent"
        w = self.g.glorot(f"{node_id}.W", (d_in, d_out), d_in, d_out)
        u = self.g.glorot(f"{node_id}.U", (d_out, d_out), d_out, d_out)
        b = self.g.zeros(f"{node_id}.b", (d_out,))
        return self.g.node(node_id, OpKind.RECURRENT, [source], (BATCH, d_out), [w, u, b], axis=axis)

    def _combine(self, p: PayloadDecl, parts: List[str]) -> str:
        d = self.payload_dim(p)
        if len(parts) == 1 and self.g.shape(parts[0])[-1] == d:
            return parts[0]
        source = parts[0]
        if len(parts) > 1:
            lead = self.g.shape(parts[0])[:-1]
            for part in parts[1:]:
                if self.g.shape(part)[:-1] != lead:
                    raise ShapeError(f"payload '{p.name}': inputs disagree on leading axes")
            width = sum(self.g.shape(part)[-1] for part in parts)
            source = self.g.node(f"{p.name}/concat", OpKind.CONCAT, parts, lead + (width,))
        return self.g.linear(f"{p.name}/proj", source, d)

    def _compile_payload(self, p: PayloadDecl) -> None:
        fields = p.data_fields
        if len(fields) > 1:
            raise UnsupportedCombination(f"payload '{p.name}' reads more than one data field")

        if p.kind == PayloadKind.SEQUENCE:
            if p.refs or not fields:
                raise UnsupportedCombination(f"sequence payload '{p.name}' must read exactly one data field")
            self.payload_nodes[p.name] = self._embed(p, fields[0], per_element=True)
            return

        parts: List[str] = []
        if fields:
            parts.append(self._embed(p, fields[0], per_element=p.kind == PayloadKind.SET))
        for ref in p.refs:
            target = self.schema.payload(ref.payload)
            source = self.payload_nodes[ref.payload]
            if p.kind == PayloadKind.SINGLETON:
                if target.kind == PayloadKind.SEQUENCE:
                    parts.append(self._encode_sequence(p, ref.payload))
                elif target.kind == PayloadKind.SET:
                    parts.append(self.g.node(f"{p.name}/{ref.payload}/mean_pool", OpKind.MEAN_POOL, [source],
                                             (BATCH, self.g.shape(source)[-1]), axis=length_axis(ref.payload)))
                else:
                    parts.append(source)
            else:
                if target.kind != PayloadKind.SEQUENCE or ref.span_field is None:
                    raise UnsupportedCombination(
                        f"set payload '{p.name}' can only reference a sequence payload through a span field")
                parts.append(self.g.node(
                    f"{p.name}/{ref.payload}/span_pool", OpKind.SPAN_POOL, [source],
                    (BATCH, length_axis(p.name), self.g.shape(source)[-1]),
                    payload=p.name, sequence=ref.payload, span_field=ref.span_field,
                    axis=length_axis(ref.payload)
                ))
        self.payload_nodes[p.name] = self._combine(p, parts)

    # ---------- tasks ----------

    def _slice_expert(self, prefix: str, hidden: str, k: int) -> Tuple[str, str]:
        h = self.choice.hidden_dim
        self.g.linear(f"{prefix}/expert_hidden", hidden, h)
        repr_id = self.g.relu(f"{prefix}/expert_repr", f"{prefix}/expert_hidden")
        logits_id = self.g.linear(f"{prefix}/expert_logits", repr_id, k)
        return repr_id, logits_id

    def _compile_task(self, t: TaskDecl, outputs, logits, blocks) -> None:
        h = self.choice.hidden_dim
        hidden = self.g.dense(f"{t.name}/hidden", self.payload_nodes[t.payload], h)

        if t.kind == TaskKind.SELECT:
            if any(s.tasks is not None and t.name in s.tasks for s in self.schema.slices):
                raise UnsupportedCombination(f"slices cannot target select task '{t.name}'")
            candidates = self.g.dense(f"{t.name}/candidate_hidden", self.payload_nodes[t.select], h)
            w = self.g.glorot(f"{t.name}/logits.W", (h, h), h, h)
            axis = length_axis(t.select)
            logits[t.name] = self.g.node(f"{t.name}/logits", OpKind.CANDIDATE_SCORE, [hidden, candidates],
                                         (BATCH, axis), [w], axis=axis)
            outputs[t.name] = self.g.node(f"{t.name}/output", OpKind.SOFTMAX, [logits[t.name]], (BATCH, axis),
                                          axis=axis)
            return

        k = len(t.labels)
        slices = self.schema.slices_for(t.name)
        if slices:
            task_blocks = []
            base_repr, base_logits = self._slice_expert(f"{t.name}/base", hidden, k)
            task_blocks.append(SliceBlock(tag=None, indicator_logit=None, indicator=None,
                                          expert_repr=base_repr, expert_logits=base_logits))
            for s in slices:
                prefix = f"{t.name}/slice:{s.tag}"
                ind_logit = self.g.linear(f"{prefix}/indicator_logit", hidden, 1)
                ind = self.g.node(f"{prefix}/indicator", OpKind.SIGMOID, [ind_logit], self.g.shape(ind_logit))
                repr_id, logits_id = self._slice_expert(prefix, hidden, k)
                task_blocks.append(SliceBlock(tag=s.tag, indicator_logit=ind_logit, indicator=ind,
                                              expert_repr=repr_id, expert_logits=logits_id))
            inputs = [b.indicator for b in task_blocks[1:]] \
                + [b.expert_logits for b in task_blocks] + [b.expert_repr for b in task_blocks]
            combined = self.g.node(f"{t.name}/combine", OpKind.SLICE_COMBINE, inputs, self.g.shape(hidden),
                                   task_kind=t.kind.value, n_slices=len(slices))
            blocks[t.name] = tuple(task_blocks)
            head_input = combined
        else:
            head_input = hidden

        logits[t.name] = self.g.linear(f"{t.name}/logits", head_input, k)
        op = OpKind.SOFTMAX if t.kind == TaskKind.MULTICLASS else OpKind.SIGMOID
        outputs[t.name] = self.g.node(f"{t.name}/output", op, [logits[t.name]], self.g.shape(logits[t.name]))

    def compile(self) -> ModelIR:
        for name in reference_order(self.schema):
            self._compile_payload(self.schema.payload(name))

        outputs: Dict[str, str] = {}
        logits: Dict[str, str] = {}
        blocks: Dict[str, tuple] = {}
        for t in self.schema.tasks:
            self._compile_task(t, outputs, logits, blocks)

        ir = ModelIR(
            schema_doc=schema_document(self.schema),
            choice=dict(self.choice.values),
            nodes=tuple(self.g.nodes),
            params=tuple(self.g.params),
            task_outputs=outputs,
            task_logits=logits,
            slice_blocks=blocks,
            signature=build_signature(self.schema)
        )
        check_shapes(ir)
        self.logger.debug("compiled %d nodes, %d parameter tensors", len(ir.nodes), len(ir.params))
        return ir


def compile(schema: Schema, choice: ArchChoice) -> ModelIR:
    return ModelCompiler(schema, choice).compile()


# ---------- serving signature ----------

def _required_fields(schema: Schema, payload: str, acc: set) -> None:
    p = schema.payload(payload)
    for f in p.data_fields:
        acc.add(f.field)
    for ref in p.refs:
        _required_fields(schema, ref.payload, acc)


_OUTPUTS = {
    (TaskKind.MULTICLASS, PayloadKind.SINGLETON): "distribution",
    (TaskKind.MULTICLASS, PayloadKind.SEQUENCE): "per-token distribution",
    (TaskKind.BITVECTOR, PayloadKind.SINGLETON): "per-bit probabilities",
    (TaskKind.BITVECTOR, PayloadKind.SEQUENCE): "per-token per-bit probabilities",
    (TaskKind.SELECT, PayloadKind.SINGLETON): "per-candidate distribution",
}


def build_signature(schema: Schema) -> ServingSignature:
    tasks = []
    for t in schema.tasks:
        kind = schema.payload(t.payload).kind
        fields: set = set()
        _required_fields(schema, t.payload, fields)
        if t.select:
            _required_fields(schema, t.select, fields)
        tasks.append(TaskSignature(
            name=t.name,
            kind=t.kind.value,
            payload=t.payload,
            granularity=kind.value,
            labels=t.labels,
            candidates=t.select,
            inputs=tuple(sorted(fields)),
            output=_OUTPUTS[(t.kind, kind)]
        ))
    return ServingSignature(tasks=tuple(tasks))


def signature(ir: ModelIR) -> ServingSignature:
    return ir.signature


# ---------- static shape check ----------

def _infer_shape(node: IRNode, shapes: Dict[str, Tuple[Dim, ...]], params: Dict[str, ParamSpec]) -> Tuple[Dim, ...]:
    ins = [shapes[i] for i in node.inputs]
    ps = [params[p].shape for p in node.params]
    op = node.op

    def need(cond: bool, what: str):
        if not cond:
            raise ShapeError(f"node '{node.id}' ({op.value}): {what}")

    if op == OpKind.EMBED_LOOKUP:
        need(len(ins) == 0 and len(ps) == 1, "takes one table and no node inputs")
        return node.shape[:-1] + (ps[0][1],)
    if op in (OpKind.MEAN_POOL, OpKind.MAX_POOL):
        need(len(ins) == 1 and len(ins[0]) == 3 and ins[0][1] == node.attrs.get("axis"), "pools a (B, L, d) input")
        return (ins[0][0], ins[0][2])
    if op == OpKind.CONV1D:
        need(len(ins) == 1 and len(ins[0]) == 3 and len(ps) == 2, "arity")
        need(ps[0][0] == node.attrs["width"] and ps[0][1] == ins[0][2] and ps[1] == (ps[0][2],), "kernel shape")
        return ins[0][:2] + (ps[0][2],)
    if op == OpKind.RECURRENT:
        need(len(ins) == 1 and len(ins[0]) == 3 and len(ps) == 3, "arity")
        d_out = ps[0][1]
        need(ps[0][0] == ins[0][2] and ps[1] == (d_out, d_out) and ps[2] == (d_out,), "weight shapes")
        return (ins[0][0], d_out)
    if op == OpKind.SPAN_POOL:
        need(len(ins) == 1 and len(ins[0]) == 3, "pools spans of a (B, L, d) sequence")
        return (ins[0][0], length_axis(node.attrs["payload"]), ins[0][2])
    if op == OpKind.CONCAT:
        need(len(ins) >= 2 and all(s[:-1] == ins[0][:-1] for s in ins), "inputs share leading axes")
        return ins[0][:-1] + (sum(s[-1] for s in ins),)
    if op == OpKind.LINEAR:
        need(len(ins) == 1 and len(ps) == 2 and ps[0][0] == ins[0][-1] and ps[1] == (ps[0][1],), "weight shapes")
        return ins[0][:-1] + (ps[0][1],)
    if op in (OpKind.RELU, OpKind.SIGMOID, OpKind.SOFTMAX):
        need(len(ins) == 1, "unary")
        return ins[0]
    if op == OpKind.CANDIDATE_SCORE:
        need(len(ins) == 2 and len(ins[0]) == 2 and len(ins[1]) == 3 and len(ps) == 1, "arity")
        need(ps[0] == (ins[0][1], ins[1][2]), "bilinear weight shape")
        return (ins[0][0], ins[1][1])
    if op == OpKind.SLICE_COMBINE:
        n = node.attrs["n_slices"]
        need(len(ins) == 3 * n + 2, "expects indicators, expert logits and expert representations")
        indicators, logits, reprs = ins[:n], ins[n:2 * n + 1], ins[2 * n + 1:]
        lead = reprs[0][:-1]
        need(all(s == lead + (1,) for s in indicators), "indicator shapes")
        need(all(s == logits[0] and s[:-1] == lead for s in logits), "expert logits share a shape")
        need(all(s == reprs[0] for s in reprs), "expert representations share a shape")
        return reprs[0]
    raise ShapeError(f"node '{node.id}': unknown op {op}")


def check_shapes(ir: ModelIR) -> Dict[str, Tuple[Dim, ...]]:
    params = {p.name: p for p in ir.params}
    shapes: Dict[str, Tuple[Dim, ...]] = {}
    used = set()
    for node in ir.nodes:
        for i in node.inputs:
            if i not in shapes:
                raise ShapeError(f"node '{node.id}' reads '{i}' before it is defined")
        for p in node.params:
            if p not in params:
                raise ShapeError(f"node '{node.id}' uses undeclared parameter '{p}'")
            used.add(p)
        inferred = _infer_shape(node, shapes, params)
        if tuple(inferred) != tuple(node.shape):
            raise ShapeError(f"node '{node.id}': declared shape {node.shape}, inferred {inferred}")
        shapes[node.id] = tuple(node.shape)
    unused = sorted(set(params) - used)
    if unused:
        raise ShapeError(f"parameters never referenced: {unused}")
    for task, node_id in list(ir.task_outputs.items()) + list(ir.task_logits.items()):
        if node_id not in shapes:
            raise ShapeError(f"task '{task}' points at missing node '{node_id}'")
    return shapes


def bind_shape(shape: Tuple[Dim, ...], sizes: Dict[str, int]) -> Tuple[int, ...]:
    return tuple(d if isinstance(d, int) else sizes[d] for d in shape)

