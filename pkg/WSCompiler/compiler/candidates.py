from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from WSCompiler.schema.schema import TuningSpec, check_hyperparameter, parse_encoder
from WSCompiler.utils.errors import EmptySearchSpace

# 既没有搜索也没有固定时使用的默认值
DEFAULTS: Dict[str, Any] = {
    "encoder": "mean_pool",
    "embed_dim": 32,
    "hidden_dim": 32,
    "learning_rate": 0.1,
    "epochs": 10,
    "batch_size": 32,
}

ENUMERATION_LIMIT = 1 << 20


class ArchChoice(BaseModel):
    """One point of the tuning space, with defaults filled in lazily."""
    model_config = ConfigDict(frozen=True)
    values: Dict[str, Any] = Field(default_factory=dict)

    def get(self, key: str) -> Any:
        return self.values.get(key, DEFAULTS.get(key))

    def encoder_for(self, payload: str) -> Tuple[str, int]:
        return parse_encoder(self.values.get(f"encoder.{payload}", self.get("encoder")))

    @property
    def embed_dim(self) -> int:
        return int(self.get("embed_dim"))

    @property
    def hidden_dim(self) -> int:
        return int(self.get("hidden_dim"))

    @property
    def learning_rate(self) -> float:
        return float(self.get("learning_rate"))

    @property
    def epochs(self) -> int:
        return int(self.get("epochs"))

    @property
    def batch_size(self) -> int:
        return int(self.get("batch_size"))

    def resolved(self, aggregators: List[str]) -> Dict[str, Any]:
        """Every hyperparameter with its effective value, for reports and provenance."""
        out = {k: self.get(k) for k in ("embed_dim", "hidden_dim", "learning_rate", "epochs", "batch_size")}
        for name in aggregators:
            out[f"encoder.{name}"] = self.values.get(f"encoder.{name}", self.get("encoder"))
        return out

    @classmethod
    def from_values(cls, values: Dict[str, Any]) -> "ArchChoice":
        for key, value in values.items():
            check_hyperparameter(key, value)
        return cls(values=dict(values))


def _decode(index: int, keys: List[str], space: Dict[str, tuple]) -> Dict[str, Any]:
    # 混合进制，最后一个键变化最快
    point = {}
    for key in reversed(keys):
        radix = len(space[key])
        index, digit = divmod(index, radix)
        point[key] = space[key][digit]
    return {k: point[k] for k in keys}


def enumerate_candidates(tuning: TuningSpec) -> List[ArchChoice]:
    space = tuning.effective_space
    keys = sorted(space)
    for key in keys:
        if len(space[key]) == 0:
            raise EmptySearchSpace(f"search space key '{key}' has no values")

    size = 1
    for key in keys:
        size *= len(space[key])
        if size > ENUMERATION_LIMIT:
            break

    rng = np.random.default_rng(np.random.SeedSequence(tuning.seed))
    budget = tuning.budget
    if size <= ENUMERATION_LIMIT:
        if size >= budget:
            indices = [int(i) for i in rng.choice(size, size=budget, replace=False)]
        else:
            indices = [int(i) for i in rng.permutation(size)]
            indices += [int(i) for i in rng.integers(0, size, size=budget - size)]
        points = [_decode(i, keys, space) for i in indices]
    else:
        points = [
            {key: space[key][int(rng.integers(0, len(space[key])))] for key in keys}
            for _ in range(budget)
        ]

    return [ArchChoice(values={**point, **tuning.pinned}) for point in points]
