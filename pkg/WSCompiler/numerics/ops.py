"""
Forward/backward kernels, one class per IR op.

An op instance is created per node per pass; forward() keeps whatever the
matching backward() needs. backward() returns (input grads, param grads),
in the order of node.inputs and node.params.
"""

from typing import Dict, List, Tuple, Type

import numpy as np

from WSCompiler.compiler.ir import IRNode, OpKind
from WSCompiler.numerics.batch import EncodedBatch
from WSCompiler.utils.errors import ShapeError
from WSCompiler.utils.hashing import NUM_TOKEN_HASHES

Grads = Tuple[List[np.ndarray], List[np.ndarray]]

ATTENTION_FLOOR = 1e-12


class Op:
    def __init__(self, node: IRNode, batch: EncodedBatch):
        self.node = node
        self.batch = batch

    def forward(self, xs: List[np.ndarray], ps: List[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Grads:
        raise NotImplementedError

    def mask(self) -> np.ndarray:
        return self.batch.axis_mask(self.node.attrs["axis"])


class EmbedLookup(Op):
    def forward(self, xs, ps):
        (table,) = ps
        self.table_shape = table.shape
        payload = self.node.attrs["payload"]
        self.ids = self.batch.buckets[payload]
        self.present = self.batch.masks[payload].astype(np.float64)[..., None]
        rows = table[self.ids[..., 0]]
        for k in range(1, NUM_TOKEN_HASHES):
            rows = rows + table[self.ids[..., k]]
        return rows / NUM_TOKEN_HASHES * self.present

    def backward(self, grad):
        g = grad * self.present / NUM_TOKEN_HASHES
        d_table = np.zeros(self.table_shape)
        flat_g = g.reshape(-1, self.table_shape[1])
        for k in range(NUM_TOKEN_HASHES):
            np.add.at(d_table, self.ids[..., k].reshape(-1), flat_g)
        return [], [d_table]


class MeanPool(Op):
    def forward(self, xs, ps):
        (x,) = xs
        m = self.mask().astype(np.float64)
        self.weights = m / np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        return np.einsum("bl,bld->bd", self.weights, x)

    def backward(self, grad):
        return [self.weights[:, :, None] * grad[:, None, :]], []


class MaxPool(Op):
    def forward(self, xs, ps):
        (x,) = xs
        m = self.mask()
        self.x_shape = x.shape
        masked = np.where(m[:, :, None], x, -np.inf)
        self.argmax = np.argmax(masked, axis=1)
        self.nonempty = m.any(axis=1)
        out = np.take_along_axis(x, self.argmax[:, None, :], axis=1)[:, 0, :]
        # 空序列取零向量
        return np.where(self.nonempty[:, None], out, 0.0)

    def backward(self, grad):
        dx = np.zeros(self.x_shape)
        g = np.where(self.nonempty[:, None], grad, 0.0)
        np.put_along_axis(dx, self.argmax[:, None, :], g[:, None, :], axis=1)
        return [dx], []


class Conv1D(Op):
    def forward(self, xs, ps):
        (x,) = xs
        kernel, bias = ps
        self.kernel = kernel
        width = kernel.shape[0]
        self.pad = width // 2
        self.m = self.mask().astype(np.float64)[:, :, None]
        self.xp = np.pad(x * self.m, ((0, 0), (self.pad, self.pad), (0, 0)))
        length = x.shape[1]
        out = np.zeros(x.shape[:2] + (kernel.shape[2],))
        for k in range(width):
            out = out + self.xp[:, k:k + length, :] @ kernel[k]
        return (out + bias) * self.m

    def backward(self, grad):
        g = grad * self.m
        length = g.shape[1]
        width = self.kernel.shape[0]
        d_kernel = np.zeros(self.kernel.shape)
        dxp = np.zeros(self.xp.shape)
        flat_g = g.reshape(-1, g.shape[2])
        for k in range(width):
            window = self.xp[:, k:k + length, :]
            d_kernel[k] = window.reshape(-1, window.shape[2]).T @ flat_g
            dxp[:, k:k + length, :] += g @ self.kernel[k].T
        dx = dxp[:, self.pad:self.pad + length, :] * self.m
        return [dx], [d_kernel, g.sum(axis=(0, 1))]


class Recurrent(Op):
    """Elman recurrence h_t = tanh(x_t W + h_{t-1} U + b); padded steps carry h."""

    def forward(self, xs, ps):
        (x,) = xs
        w, u, b = ps
        self.x, self.w, self.u = x, w, u
        self.m = self.mask().astype(np.float64)
        batch, length, _ = x.shape
        h = np.zeros((batch, w.shape[1]))
        self.states = [h]
        for t in range(length):
            candidate = np.tanh(x[:, t, :] @ w + h @ u + b)
            mt = self.m[:, t:t + 1]
            h = mt * candidate + (1.0 - mt) * h
            self.states.append(h)
        return h

    def backward(self, grad):
        x, w, u = self.x, self.w, self.u
        length = x.shape[1]
        dw, du = np.zeros(w.shape), np.zeros(u.shape)
        db = np.zeros(w.shape[1])
        dx = np.zeros(x.shape)
        dh = grad
        for t in range(length - 1, -1, -1):
            mt = self.m[:, t:t + 1]
            h_prev, h_t = self.states[t], self.states[t + 1]
            da = dh * mt * (1.0 - h_t * h_t)
            dw += x[:, t, :].T @ da
            du += h_prev.T @ da
            db += da.sum(axis=0)
            dx[:, t, :] = da @ w.T
            dh = da @ u.T + dh * (1.0 - mt)
        return [dx], [dw, du, db]


class SpanPool(Op):
    def forward(self, xs, ps):
        (x,) = xs
        key = (self.node.attrs["payload"], self.node.attrs["span_field"])
        spans = self.batch.spans[key]
        valid = self.batch.span_masks[key]
        length = x.shape[1]
        positions = np.arange(length)[None, None, :]
        inside = (positions >= spans[:, :, :1]) & (positions < spans[:, :, 1:]) & valid[:, :, None]
        counts = np.maximum(inside.sum(axis=2, keepdims=True), 1)
        self.weights = inside / counts
        return np.einsum("bct,btd->bcd", self.weights, x)

    def backward(self, grad):
        return [np.einsum("bct,bcd->btd", self.weights, grad)], []


class Concat(Op):
    def forward(self, xs, ps):
        self.widths = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1)

    def backward(self, grad):
        cuts = np.cumsum(self.widths)[:-1]
        return list(np.split(grad, cuts, axis=-1)), []


class Linear(Op):
    def forward(self, xs, ps):
        (x,) = xs
        w, b = ps
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        d_in, d_out = self.w.shape
        flat_x = self.x.reshape(-1, d_in)
        flat_g = grad.reshape(-1, d_out)
        return [grad @ self.w.T], [flat_x.T @ flat_g, flat_g.sum(axis=0)]


class Relu(Op):
    def forward(self, xs, ps):
        (x,) = xs
        self.active = x > 0
        return np.where(self.active, x, 0.0)

    def backward(self, grad):
        return [np.where(self.active, grad, 0.0)], []


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_softmax(x: np.ndarray, mask: np.ndarray = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shift = np.max(x, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(x - shift)
    total = e.sum(axis=-1, keepdims=True)
    return np.where(total > 0, e / np.where(total > 0, total, 1.0), 0.0)


class Sigmoid(Op):
    def forward(self, xs, ps):
        self.out = sigmoid(xs[0])
        return self.out

    def backward(self, grad):
        return [grad * self.out * (1.0 - self.out)], []


class Softmax(Op):
    def forward(self, xs, ps):
        mask = self.mask() if "axis" in self.node.attrs else None
        self.out = masked_softmax(xs[0], mask)
        return self.out

    def backward(self, grad):
        p = self.out
        return [p * (grad - np.sum(grad * p, axis=-1, keepdims=True))], []


class CandidateScore(Op):
    """s_c = q^T W e_c; padded candidates score 0 and are masked by Softmax."""

    def forward(self, xs, ps):
        q, e = xs
        (w,) = ps
        self.q, self.e, self.w = q, e, w
        self.m = self.mask().astype(np.float64)
        self.qw = q @ w
        return np.einsum("bh,bch->bc", self.qw, e) * self.m

    def backward(self, grad):
        g = grad * self.m
        de = g[:, :, None] * self.qw[:, None, :]
        dqw = np.einsum("bc,bch->bh", g, self.e)
        return [dqw @ self.w.T, de], [self.q.T @ dqw]


def _multiclass_confidence(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """1 - H(softmax(l)) / ln K and its gradient w.r.t. l."""
    k = logits.shape[-1]
    if k < 2:
        return np.ones(logits.shape[:-1]), np.zeros(logits.shape)
    shift = logits - logits.max(axis=-1, keepdims=True)
    log_p = shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    entropy = -np.sum(p * log_p, axis=-1)
    scale = np.log(k)
    d_conf = p * (log_p + entropy[..., None]) / scale
    return 1.0 - entropy / scale, d_conf


def _bitvector_confidence(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """1 - mean_b H_bin(sigmoid(l_b)) / ln 2 and its gradient."""
    bits = logits.shape[-1]
    q = sigmoid(logits)
    entropy = q * np.logaddexp(0.0, -logits) + (1.0 - q) * np.logaddexp(0.0, logits)
    scale = np.log(2.0) * bits
    d_conf = logits * q * (1.0 - q) / scale
    return 1.0 - entropy.sum(axis=-1) / scale, d_conf


def slice_attention(gates: List[np.ndarray], logits: List[np.ndarray], task_kind: str) -> dict:
    """
    Membership-and-confidence attention over experts. gates[0] is the base
    expert's indicator (all ones). Units whose scores all vanish fall back
    to the base expert.
    """
    confidence = _bitvector_confidence if task_kind == "bitvector" else _multiclass_confidence
    conf, d_conf = zip(*(confidence(l) for l in logits))
    scores = np.stack([g * c for g, c in zip(gates, conf)], axis=-1)   # (..., n+1)
    total = scores.sum(axis=-1, keepdims=True)
    degenerate = total[..., 0] <= ATTENTION_FLOOR
    attention = scores / np.where(degenerate[..., None], 1.0, total)
    attention[degenerate] = 0.0
    attention[degenerate, 0] = 1.0
    return {"attention": attention, "conf": conf, "d_conf": d_conf, "total": total, "degenerate": degenerate}


class SliceCombine(Op):
    """
    Inputs: n indicator probs, n + 1 expert logits, n + 1 expert reprs
    (index 0 is the base expert, whose indicator is fixed at 1).
    """

    def forward(self, xs, ps):
        n = self.node.attrs["n_slices"]
        gates = [np.ones(xs[n].shape[:-1])] + [x[..., 0] for x in xs[:n]]
        reprs = xs[2 * n + 1:]
        att = slice_attention(gates, xs[n:2 * n + 1], self.node.attrs["task_kind"])

        self.n, self.gates, self.reprs = n, gates, reprs
        self.conf, self.d_conf = att["conf"], att["d_conf"]
        self.total, self.degenerate, self.attention = att["total"], att["degenerate"], att["attention"]
        out = self.attention[..., 0:1] * reprs[0]
        for i in range(1, n + 1):
            out = out + self.attention[..., i:i + 1] * reprs[i]
        return out

    def backward(self, grad):
        n, a = self.n, self.attention
        live = (~self.degenerate).astype(np.float64)
        d_reprs = [a[..., i:i + 1] * grad for i in range(n + 1)]
        d_att = np.stack([np.sum(grad * r, axis=-1) for r in self.reprs], axis=-1)
        centered = d_att - np.sum(a * d_att, axis=-1, keepdims=True)
        d_scores = centered / np.where(self.degenerate[..., None], 1.0, self.total) * live[..., None]

        d_gates = [(d_scores[..., i] * self.conf[i])[..., None] for i in range(1, n + 1)]
        d_logits = [(d_scores[..., i] * self.gates[i])[..., None] * self.d_conf[i] for i in range(n + 1)]
        return d_gates + d_logits + d_reprs, []


OPS: Dict[OpKind, Type[Op]] = {
    OpKind.EMBED_LOOKUP: EmbedLookup,
    OpKind.MEAN_POOL: MeanPool,
    OpKind.MAX_POOL: MaxPool,
    OpKind.CONV1D: Conv1D,
    OpKind.RECURRENT: Recurrent,
    OpKind.SPAN_POOL: SpanPool,
    OpKind.CONCAT: Concat,
    OpKind.LINEAR: Linear,
    OpKind.RELU: Relu,
    OpKind.SOFTMAX: Softmax,
    OpKind.SIGMOID: Sigmoid,
    OpKind.CANDIDATE_SCORE: CandidateScore,
    OpKind.SLICE_COMBINE: SliceCombine,
}


def make_op(node: IRNode, batch: EncodedBatch) -> Op:
    try:
        return OPS[node.op](node, batch)
    except KeyError:
        raise ShapeError(f"no kernel for op {node.op}")
