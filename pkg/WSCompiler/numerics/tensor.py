"""Parameter storage: deterministic initialization and the OVPM blob."""

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator

import numpy as np

from WSCompiler.compiler.ir import Initializer, ModelIR
from WSCompiler.utils.errors import ShapeError, StoreFormatError
from WSCompiler.utils.hashing import fnv1a64, sha256_bytes

PARAM_MAGIC = b"OVPM"
PARAM_VERSION = 1
_HEADER = struct.Struct("<4sIQI")   # magic, version, seed, n_params
_ENTRY_HEAD = struct.Struct("<H")   # name 长度
_NDIM = struct.Struct("<I")
_U64 = struct.Struct("<Q")

Tensor = np.ndarray


def param_rng(name: str, seed: int) -> np.random.Generator:
    # 计数器型 PRNG：每个参数按 (名字, seed) 独立取流
    key = (fnv1a64(name.encode("utf-8")) << 64) | (seed & ((1 << 64) - 1))
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ParamStore:
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.tensors))

    def __len__(self) -> int:
        return len(self.tensors)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def to_bytes(self) -> bytes:
        names = sorted(self.tensors)
        table = bytearray()
        offset = 0
        for name in names:
            arr = self.tensors[name]
            encoded = name.encode("utf-8")
            table += _ENTRY_HEAD.pack(len(encoded)) + encoded
            table += _NDIM.pack(arr.ndim) + b"".join(_U64.pack(d) for d in arr.shape)
            table += _U64.pack(offset)
            offset += arr.size * 8
        data = b"".join(np.ascontiguousarray(self.tensors[n], dtype="<f8").tobytes() for n in names)
        return _HEADER.pack(PARAM_MAGIC, PARAM_VERSION, self.seed, len(names)) + bytes(table) + data

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if len(blob) < _HEADER.size:
            raise StoreFormatError("parameter blob is truncated")
        magic, version, seed, count = _HEADER.unpack_from(blob, 0)
        if magic != PARAM_MAGIC or version != PARAM_VERSION:
            raise StoreFormatError(f"not a parameter blob (magic {magic!r}, version {version})")
        pos = _HEADER.size
        entries = []
        try:
            for _ in range(count):
                (n,) = _ENTRY_HEAD.unpack_from(blob, pos)
                pos += _ENTRY_HEAD.size
                name = blob[pos:pos + n].decode("utf-8")
                pos += n
                (ndim,) = _NDIM.unpack_from(blob, pos)
                pos += _NDIM.size
                shape = tuple(_U64.unpack_from(blob, pos + 8 * i)[0] for i in range(ndim))
                pos += 8 * ndim
                (offset,) = _U64.unpack_from(blob, pos)
                pos += _U64.size
                entries.append((name, shape, offset))
        except struct.error as e:
            raise StoreFormatError(f"parameter table is truncated: {e}")

        tensors = {}
        for name, shape, offset in entries:
            size = int(np.prod(shape, dtype=np.int64))
            start = pos + offset
            if start + size * 8 > len(blob):
                raise StoreFormatError(f"parameter '{name}' runs past the end of the blob")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=start).astype(np.float64).reshape(shape)
        return cls(tensors, seed)

    @property
    def digest(self) -> str:
        return sha256_bytes(self.to_bytes())


def init_params(ir: ModelIR, seed: int) -> ParamStore:
    tensors = {}
    for spec in ir.params:
        if spec.init == Initializer.ZEROS:
            tensors[spec.name] = np.zeros(spec.shape, dtype=np.float64)
        else:
            bound = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
            tensors[spec.name] = param_rng(spec.name, seed).uniform(-bound, bound, size=spec.shape)
    return ParamStore(tensors, seed)


def check_params(ir: ModelIR, params: ParamStore) -> None:
    for spec in ir.params:
        if spec.name not in params:
            raise ShapeError(f"parameter '{spec.name}' is missing")
        if params[spec.name].shape != tuple(spec.shape):
            raise ShapeError(f"parameter '{spec.name}' has shape {params[spec.name].shape}, expected {spec.shape}")
