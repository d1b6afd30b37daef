"""
Synthetic schemas and data files with known ground truth.

Every generator is deterministic in its seed and returns the schema
document, the JSONL records and the truth it planted (true labels, source
accuracies), so tests can compare fitted quantities against it.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from WSCompiler.labels.matrix import ABSTAIN, LabelMatrix, UnitRef
from WSCompiler.schema.schema import TaskKind
from WSCompiler.utils.hashing import canonical_json


@dataclass
class SyntheticDataset:
    name: str
    schema: Dict[str, Any]
    records: List[Dict[str, Any]]
    truth: Dict[str, Any] = field(default_factory=dict)


def write_dataset(dataset: SyntheticDataset, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema_path = out / "schema.json"
    data_path = out / "data.jsonl"
    schema_path.write_text(json.dumps(dataset.schema, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    data_path.write_text("".join(canonical_json(r) + "\n" for r in dataset.records), encoding="utf-8")
    return schema_path, data_path


def _noisy(rng: np.random.Generator, truth: int, k: int, accuracy: float) -> int:
    if rng.random() < accuracy:
        return truth
    other = int(rng.integers(0, k - 1))
    return other + (other >= truth)


def _split(rng: np.random.Generator, dev: float = 0.1, test: float = 0.1) -> str:
    u = rng.random()
    if u < test:
        return "test"
    return "dev" if u < test + dev else "train"


# ---------- label model ----------

def label_model_votes(n: int, k: int, accuracies: Sequence[float], abstain: float,
                      prior: Optional[Sequence[float]] = None, seed: int = 0) -> Tuple[LabelMatrix, np.ndarray]:
    """Votes drawn from the one-accuracy-per-source generative model."""
    rng = np.random.default_rng(seed)
    prior = np.full(k, 1.0 / k) if prior is None else np.asarray(prior, dtype=np.float64)
    y = rng.choice(k, size=n, p=prior)
    votes = np.full((n, len(accuracies)), ABSTAIN, dtype=np.int64)
    for j, acc in enumerate(accuracies):
        cast = rng.random(n) >= abstain
        correct = rng.random(n) < acc
        other = rng.integers(0, k - 1, size=n)
        wrong = other + (other >= y)
        votes[:, j] = np.where(cast, np.where(correct, y, wrong), ABSTAIN)
    matrix = LabelMatrix(
        task="synthetic",
        kind=TaskKind.MULTICLASS,
        units=[UnitRef(i) for i in range(n)],
        cardinality=np.full(n, k, dtype=np.int64),
        sources=[f"s{j}" for j in range(len(accuracies))],
        votes=votes
    )
    return matrix, y


# ---------- running example ----------

PEOPLE = ("obama", "lincoln", "curie", "turing", "lovelace", "einstein", "darwin", "tesla")
COUNTRIES = ("france", "japan", "kenya", "peru", "canada", "norway", "india", "chile")
INTENTS = ("height", "age", "none")
ENTITY_BITS = ("person", "location", "country")


def _running_schema() -> Dict[str, Any]:
    return {
        "payloads": [
            {"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
            {"name": "entities", "kind": "set",
             "inputs": [{"field": "entities"}, {"payload": "tokens", "span_field": "range"}]},
            {"name": "query", "kind": "singleton", "inputs": [{"payload": "tokens"}, {"payload": "entities"}]},
        ],
        "tasks": [
            {"name": "Intent", "payload": "query", "kind": {"multiclass": list(INTENTS)}},
            {"name": "EntityType", "payload": "tokens", "kind": {"bitvector": list(ENTITY_BITS)}},
            {"name": "IntentArg", "payload": "query", "kind": {"select": "entities"}},
        ],
        "slices": [],
        "tuning": {
            "search_space": {"encoder": ["mean_pool", "max_pool", "conv1d:3", "recurrent"], "hidden_dim": [16, 32]},
            "pinned": {"embed_dim": 16, "epochs": 8, "learning_rate": 0.2, "batch_size": 16},
            "budget": 1,
            "seed": 0
        }
    }


def running_example(n: int = 200, seed: int = 0) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    records = []
    truth = {"Intent": [], "IntentArg": []}
    for _ in range(n):
        intent = int(rng.integers(0, len(INTENTS)))
        person = PEOPLE[int(rng.integers(0, len(PEOPLE)))]
        country = COUNTRIES[int(rng.integers(0, len(COUNTRIES)))]
        if INTENTS[intent] == "height":
            tokens = ["how", "tall", "is", person, "from", country]
        elif INTENTS[intent] == "age":
            tokens = ["how", "old", "was", person, "in", country]
        else:
            tokens = ["weather", "in", country, "near", person]
        entities = [{"id": person, "range": [tokens.index(person), tokens.index(person) + 1]},
                    {"id": country, "range": [tokens.index(country), tokens.index(country) + 1]}]
        if rng.random() < 0.5:
            entities.reverse()
        # 问身高/年龄时指向人物，否则指向国家
        target_id = country if INTENTS[intent] == "none" else person
        arg = [e["id"] for e in entities].index(target_id)
        bits = [["person"] if t == person else ["location", "country"] if t == country else [] for t in tokens]

        intent_votes = []
        for source, acc, cover in (("keyword", 0.9, 0.9), ("crowd", 0.75, 0.7), ("heuristic", 0.6, 0.8)):
            if rng.random() < cover:
                intent_votes.append({"source": source, "value": INTENTS[_noisy(rng, intent, 3, acc)]})
        entity_votes = [{"source": "gazetteer", "value": bits}]
        if rng.random() < 0.7:
            crowd_bits = [[b for b in ENTITY_BITS if (b in on) != (rng.random() < 0.05)] for on in bits]
            entity_votes.append({"source": "crowd", "value": crowd_bits})
        arg_votes = [{"source": "rule", "value": target_id}]
        if rng.random() < 0.6:
            arg_votes.append({"source": "crowd", "value": _noisy(rng, arg, 2, 0.8)})

        records.append({
            "tokens": tokens,
            "entities": entities,
            "supervision": {"Intent": intent_votes, "EntityType": entity_votes, "IntentArg": arg_votes},
            "tags": []
        })
        truth["Intent"].append(intent)
        truth["IntentArg"].append(arg)
    return SyntheticDataset("running-example", _running_schema(), records, truth)


# ---------- noisy singleton ----------

def _class_tokens(rng: np.random.Generator, cls: int, length: int, signal: float, n_noise: int = 40) -> List[str]:
    tokens = []
    for _ in range(length):
        if rng.random() < signal:
            tokens.append(f"w{cls}_{int(rng.integers(0, 12))}")
        else:
            tokens.append(f"n_{int(rng.integers(0, n_noise))}")
    return tokens


def _singleton_schema(labels: Sequence[str], slices: Sequence[str] = (), epochs: int = 12) -> Dict[str, Any]:
    return {
        "payloads": [
            {"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
            {"name": "doc", "kind": "singleton", "inputs": [{"payload": "tokens"}]},
        ],
        "tasks": [{"name": "Label", "payload": "doc", "kind": {"multiclass": list(labels)}}],
        "slices": [{"tag": s} for s in slices],
        "tuning": {
            "search_space": {},
            "pinned": {"encoder": "mean_pool", "embed_dim": 16, "hidden_dim": 16, "epochs": epochs,
                       "learning_rate": 0.3, "batch_size": 32},
            "budget": 1,
            "seed": 0
        }
    }


def noisy_singleton(n: int = 1500, seed: int = 0, accuracies: Sequence[float] = (0.85, 0.7, 0.55),
                    abstain: float = 0.3, k: int = 3) -> SyntheticDataset:
    """Train/dev rows carry conflicting sources; test rows carry the clean label."""
    rng = np.random.default_rng(seed)
    labels = [f"c{i}" for i in range(k)]
    records, truth = [], []
    for _ in range(n):
        y = int(rng.integers(0, k))
        split = _split(rng, dev=0.1, test=0.2)
        if split == "test":
            votes = [{"source": "gold", "value": labels[y]}]
        else:
            votes = [
                {"source": f"src{j}", "value": labels[_noisy(rng, y, k, acc)]}
                for j, acc in enumerate(accuracies) if rng.random() >= abstain
            ]
        records.append({
            "tokens": _class_tokens(rng, y, int(rng.integers(4, 9)), signal=0.5),
            "supervision": {"Label": votes},
            "tags": [split]
        })
        truth.append(y)
    return SyntheticDataset("noisy-singleton", _singleton_schema(labels), records,
                            {"Label": truth, "accuracies": list(accuracies)})


# ---------- slice ----------

SLICE_TAG = "rare"
SLICE_MARKER = "zz_rare"


def slice_dataset(n: int = 3000, seed: int = 0, rate: float = 0.05, with_slice: bool = True) -> SyntheticDataset:
    """A small subpopulation, marked by one token, where the feature-label relation is inverted."""
    rng = np.random.default_rng(seed)
    labels = ["neg", "pos"]
    records, truth = [], []
    for _ in range(n):
        in_slice = rng.random() < rate
        cue = int(rng.integers(0, 2))
        y = 1 - cue if in_slice else cue
        tokens = _class_tokens(rng, cue, int(rng.integers(4, 8)), signal=0.6)
        if in_slice:
            tokens.insert(int(rng.integers(0, len(tokens) + 1)), SLICE_MARKER)
        split = _split(rng, dev=0.1, test=0.3)
        tags = [split] + ([SLICE_TAG] if in_slice else [])
        records.append({
            "tokens": tokens,
            "supervision": {"Label": [{"source": "annotator", "value": labels[y]}]},
            "tags": tags
        })
        truth.append(y)
    schema = _singleton_schema(labels, [SLICE_TAG] if with_slice else [], epochs=15)
    return SyntheticDataset("slice", schema, records, {"Label": truth})


# ---------- scaling ----------

TOPICS = ("sports", "music", "travel", "food")


def _scaling_schema() -> Dict[str, Any]:
    return {
        "payloads": [
            {"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
            {"name": "doc", "kind": "singleton", "inputs": [{"payload": "tokens"}]},
            {"name": "cands", "kind": "set", "inputs": [{"field": "cands"}, {"payload": "tokens", "span_field": "span"}]},
        ],
        "tasks": [
            {"name": "Topic", "payload": "doc", "kind": {"multiclass": list(TOPICS)}},
            {"name": "KeyTag", "payload": "tokens", "kind": {"multiclass": ["O", "KEY"]}},
            {"name": "Pick", "payload": "doc", "kind": {"select": "cands"}},
        ],
        "slices": [],
        "tuning": {
            "search_space": {},
            "pinned": {"encoder": "mean_pool", "embed_dim": 16, "hidden_dim": 16, "epochs": 10,
                       "learning_rate": 0.2, "batch_size": 16},
            "budget": 1,
            "seed": 0
        }
    }


def scaling_dataset(n_train: int = 3200, n_test: int = 400, n_dev: int = 100, seed: int = 0) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    records = []
    splits = ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test
    for split in splits:
        topic = int(rng.integers(0, len(TOPICS)))
        tokens = []
        key = []
        for _ in range(9):
            if rng.random() < 0.35:
                tokens.append(f"{TOPICS[topic]}_{int(rng.integers(0, 20))}")
                key.append(1)
            else:
                tokens.append(f"x_{int(rng.integers(0, 60))}")
                key.append(0)
        if not any(key):
            tokens[0] = f"{TOPICS[topic]}_0"
            key[0] = 1
        # 三个不相交的片段，含主题词最多的那个是答案
        cands = [{"id": f"c{i}", "span": [3 * i, 3 * i + 3]} for i in range(3)]
        pick = int(np.argmax([sum(key[3 * i:3 * i + 3]) for i in range(3)]))

        topic_votes, tag_votes, pick_votes = [], [], []
        for source, acc in (("alpha", 0.8), ("beta", 0.7)):
            if split == "test" or rng.random() >= 0.2:
                a = 1.0 if split == "test" else acc
                topic_votes.append({"source": source, "value": TOPICS[_noisy(rng, topic, 4, a)]})
                tag_votes.append({"source": source,
                                  "value": [["O", "KEY"][_noisy(rng, k, 2, a)] for k in key]})
                pick_votes.append({"source": source, "value": _noisy(rng, pick, 3, a)})
            if split == "test":
                break
        records.append({
            "tokens": tokens,
            "cands": cands,
            "supervision": {"Topic": topic_votes, "KeyTag": tag_votes, "Pick": pick_votes},
            "tags": [split]
        })
    return SyntheticDataset("scaling", _scaling_schema(), records, {})


GENERATORS: Dict[str, Callable[..., SyntheticDataset]] = {
    "running-example": running_example,
    "noisy-singleton": noisy_singleton,
    "slice": slice_dataset,
    "scaling": scaling_dataset,
}


def generate(kind: str, n: Optional[int] = None, seed: int = 0) -> SyntheticDataset:
    if kind not in GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {sorted(GENERATORS)}")
    if n is None:
        return GENERATORS[kind](seed=seed)
    if kind == "scaling":
        return scaling_dataset(n_train=n, seed=seed)
    return GENERATORS[kind](n=n, seed=seed)
