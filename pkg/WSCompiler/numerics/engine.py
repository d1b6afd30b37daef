from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from WSCompiler.compiler.compiler import bind_shape
from WSCompiler.compiler.ir import ModelIR
from WSCompiler.numerics.batch import EncodedBatch
from WSCompiler.numerics.ops import Op, make_op
from WSCompiler.numerics.tensor import ParamStore
from WSCompiler.utils.errors import NonFiniteError, ShapeError

FD_STEP = 1e-5
# 相对误差分母的下限，避免极小梯度被浮点噪声放大
FD_FLOOR = 1e-3


class Trace(dict):
    """node id -> value, plus the op instances backward needs."""

    def __init__(self, batch: EncodedBatch):
        super().__init__()
        self.batch = batch
        self.ops: Dict[str, Op] = {}


def forward(ir: ModelIR, params: ParamStore, batch: EncodedBatch, check_shapes: bool = True) -> Trace:
    trace = Trace(batch)
    sizes = batch.axis_sizes()
    for node in ir.nodes:
        op = make_op(node, batch)
        out = op.forward([trace[i] for i in node.inputs], [params[p] for p in node.params])
        if check_shapes:
            expected = bind_shape(node.shape, sizes)
            if out.shape != expected:
                raise ShapeError(f"node '{node.id}': runtime shape {out.shape}, expected {expected}")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"node '{node.id}' produced a non-finite value")
        trace[node.id] = out
        trace.ops[node.id] = op
    return trace


def backward(ir: ModelIR, trace: Trace, seeds: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Reverse-mode pass from seed gradients at any nodes to every parameter."""
    pending: Dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in seeds.items()}
    grads = {spec.name: np.zeros(spec.shape) for spec in ir.params}
    for node in reversed(ir.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        d_inputs, d_params = trace.ops[node.id].backward(g)
        for name, dx in zip(node.inputs, d_inputs):
            pending[name] = pending[name] + dx if name in pending else dx
        for name, dp in zip(node.params, d_params):
            grads[name] += dp
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of '{name}' is not finite")
    return grads


# ---------- gradient check ----------

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    params: List[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def failures(self) -> List[str]:
        return [p.name for p in self.params if not p.passed]


def _projection(ir: ModelIR, trace: Trace, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    # 只投影有效位置，padding 不进入损失
    weights = {}
    for task in sorted(ir.task_outputs):
        node = ir.node(ir.task_outputs[task])
        r = rng.standard_normal(trace[node.id].shape)
        if len(node.shape) >= 2 and isinstance(node.shape[1], str) and node.shape[1].startswith("L:"):
            mask = trace.batch.axis_mask(node.shape[1]).astype(np.float64)
            r = r * mask.reshape(mask.shape + (1,) * (r.ndim - 2))
        weights[node.id] = r
    return weights


def _projected_loss(ir: ModelIR, params: ParamStore, batch: EncodedBatch, weights: Dict[str, np.ndarray]) -> float:
    trace = forward(ir, params, batch, check_shapes=False)
    return float(sum(np.sum(trace[k] * w) for k, w in weights.items()))


def _pick_entries(analytic: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    size = analytic.size
    if size <= limit:
        return np.arange(size)
    top = np.argsort(-np.abs(analytic.reshape(-1)), kind="stable")[:limit // 2]
    rest = np.setdiff1d(np.arange(size), top)
    extra = rng.choice(rest, size=limit - top.size, replace=False)
    return np.sort(np.concatenate([top, extra]))


def grad_check(ir: ModelIR, params: ParamStore, batch: EncodedBatch, tolerance: float = 1e-4,
               max_entries: int = 32, seed: int = 0,
               perturb: Optional[Dict[str, float]] = None) -> GradCheckReport:
    """
    Compare analytic gradients with central differences on a random
    projection of every task output. Large tensors are checked on a seeded
    sample of entries that always includes the largest analytic gradients.
    `perturb` adds a constant to named analytic gradients (fault injection).
    The relative error of an entry is |analytic - numeric| divided by
    max(|analytic|, |numeric|, FD_FLOOR). Below FD_FLOOR the check is
    effectively absolute: gradients near zero pass when they differ by less
    than tolerance * FD_FLOOR.
    """
    report = GradCheckReport(tolerance=tolerance)
    if not ir.params:
        return report

    rng = np.random.default_rng(seed)
    trace = forward(ir, params, batch)
    weights = _projection(ir, trace, rng)
    analytic = backward(ir, trace, weights)
    for name, delta in (perturb or {}).items():
        analytic[name] = analytic[name] + delta

    work = params.copy()
    for spec in ir.params:
        tensor = work.tensors[spec.name]
        flat = tensor.reshape(-1)
        grad = analytic[spec.name].reshape(-1)
        worst = 0.0
        entries = _pick_entries(analytic[spec.name], max_entries, rng)
        for idx in entries:
            original = flat[idx]
            flat[idx] = original + FD_STEP
            up = _projected_loss(ir, work, batch, weights)
            flat[idx] = original - FD_STEP
            down = _projected_loss(ir, work, batch, weights)
            flat[idx] = original
            numeric = (up - down) / (2 * FD_STEP)
            err = abs(grad[idx] - numeric) / max(abs(grad[idx]), abs(numeric), FD_FLOOR)
            worst = max(worst, err)
        report.params.append(ParamCheck(spec.name, worst, int(entries.size), worst <= tolerance))
    return report
