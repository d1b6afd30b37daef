"""Records -> padded arrays for one forward pass."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from WSCompiler.compiler.ir import length_axis
from WSCompiler.schema.schema import PayloadKind, Schema
from WSCompiler.store.codec import Record
from WSCompiler.utils.hashing import NUM_TOKEN_HASHES, token_buckets


@dataclass
class EncodedBatch:
    size: int
    rows: List[Optional[int]]
    buckets: Dict[str, np.ndarray] = field(default_factory=dict)   # (B, 2) 或 (B, L, 2)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)     # (B,) 或 (B, L)
    spans: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)      # (B, C, 2)
    span_masks: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)  # (B, C)
    tags: List[Tuple[str, ...]] = field(default_factory=list)

    def length(self, payload: str) -> int:
        return self.masks[payload].shape[1]

    def axis_mask(self, axis: str) -> np.ndarray:
        return self.masks[axis.split(":", 1)[1]]

    def axis_sizes(self) -> Dict[str, int]:
        sizes = {"B": self.size}
        for payload, mask in self.masks.items():
            if mask.ndim == 2:
                sizes[length_axis(payload)] = mask.shape[1]
        return sizes

    def membership(self, tag: str) -> np.ndarray:
        return np.array([tag in t for t in self.tags], dtype=np.float64)


def _token_array(tokens: List[List[str]], length: int) -> Tuple[np.ndarray, np.ndarray]:
    b = len(tokens)
    ids = np.zeros((b, length, NUM_TOKEN_HASHES), dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    for i, seq in enumerate(tokens):
        for t, tok in enumerate(seq):
            ids[i, t] = token_buckets(tok)
            mask[i, t] = True
    return ids, mask


def encode_batch(schema: Schema, records: Sequence[Record], rows: Optional[Sequence[int]] = None) -> EncodedBatch:
    size = len(records)
    batch = EncodedBatch(
        size=size,
        rows=list(rows) if rows is not None else [None] * size,
        tags=[tuple(r.tags) for r in records]
    )
    for p in schema.payloads:
        values = [r.payloads.get(p.name) for r in records]
        if p.kind == PayloadKind.SINGLETON:
            ids = np.zeros((size, NUM_TOKEN_HASHES), dtype=np.int64)
            mask = np.zeros(size, dtype=bool)
            for i, v in enumerate(values):
                if isinstance(v, str):
                    ids[i] = token_buckets(v)
                    mask[i] = True
            batch.buckets[p.name], batch.masks[p.name] = ids, mask
            continue

        if p.kind == PayloadKind.SEQUENCE:
            seqs = [v or [] for v in values]
        else:
            seqs = [[e["id"] for e in (v or [])] for v in values]
        # 空 batch 也至少保留长度 1，避免零长度轴
        length = max([1] + [len(s) for s in seqs])
        batch.buckets[p.name], batch.masks[p.name] = _token_array(seqs, length)

        if p.kind == PayloadKind.SET:
            for ref in p.refs:
                if ref.span_field is None:
                    continue
                spans = np.zeros((size, length, 2), dtype=np.int64)
                valid = np.zeros((size, length), dtype=bool)
                for i, v in enumerate(values):
                    for c, element in enumerate(v or []):
                        span = element.get(ref.span_field)
                        if span is not None:
                            spans[i, c] = span
                            valid[i, c] = True
                batch.spans[(p.name, ref.span_field)] = spans
                batch.span_masks[(p.name, ref.span_field)] = valid
    return batch
