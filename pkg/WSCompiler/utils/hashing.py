import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Union

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF

# 哈希词表：2^15 个桶，每个 token 用两个加盐哈希
VOCAB_BUCKETS = 1 << 15
NUM_TOKEN_HASHES = 2


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & MASK64
    return h


@lru_cache(maxsize=1 << 16)
def token_buckets(token: str) -> tuple:
    encoded = token.encode("utf-8")
    return tuple(
        fnv1a64(f"{salt}:".encode("ascii") + encoded) % VOCAB_BUCKETS
        for salt in range(NUM_TOKEN_HASHES)
    )


def canonical_json(obj: Any) -> str:
    # 紧凑、键排序，保证字节级可复现
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
