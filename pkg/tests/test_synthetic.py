import json

import pytest

from WSCompiler.labels.matrix import ABSTAIN
from WSCompiler.schema.schema import parse_schema
from WSCompiler.store.codec import parse_record
from WSCompiler.synthetic.generators import (
    GENERATORS, SLICE_MARKER, SLICE_TAG, generate, label_model_votes, noisy_singleton, scaling_dataset,
    slice_dataset, write_dataset
)
from WSCompiler.utils.hashing import canonical_json


class TestGenerators:
    """测试合成数据生成"""

    @pytest.mark.parametrize("kind", sorted(GENERATORS))
    def test_records_validate(self, kind):
        """测试生成的记录都能通过 schema 校验"""
        dataset = generate(kind, n=30, seed=1)
        schema = parse_schema(json.dumps(dataset.schema))
        for obj in dataset.records:
            parse_record(schema, obj)

    @pytest.mark.parametrize("kind", sorted(GENERATORS))
    def test_deterministic(self, kind):
        """测试相同种子得到相同数据"""
        a, b = generate(kind, n=20, seed=5), generate(kind, n=20, seed=5)
        assert [canonical_json(r) for r in a.records] == [canonical_json(r) for r in b.records]
        c = generate(kind, n=20, seed=6)
        assert [canonical_json(r) for r in a.records] != [canonical_json(r) for r in c.records]

    def test_unknown_kind(self):
        """测试未知的数据类型"""
        with pytest.raises(ValueError):
            generate("nope")

    def test_label_model_votes(self):
        """测试投票矩阵的准确率与弃权率"""
        matrix, y = label_model_votes(n=5000, k=3, accuracies=(0.9, 0.6), abstain=0.25, seed=0)
        assert matrix.votes.shape == (5000, 2)
        cast = matrix.votes != ABSTAIN
        assert abs(cast.mean() - 0.75) < 0.03
        for j, acc in enumerate((0.9, 0.6)):
            hits = matrix.votes[cast[:, j], j] == y[cast[:, j]]
            assert abs(hits.mean() - acc) < 0.03

    def test_noisy_singleton_test_rows_are_clean(self):
        """测试 test 行只有 gold 来源且等于真值"""
        dataset = noisy_singleton(n=300, seed=2)
        for record, y in zip(dataset.records, dataset.truth["Label"]):
            if record["tags"] == ["test"]:
                assert record["supervision"]["Label"] == [{"source": "gold", "value": f"c{y}"}]

    def test_slice_marker(self):
        """测试 slice tag 与标记 token 一致"""
        dataset = slice_dataset(n=500, seed=3, rate=0.1)
        tagged = [r for r in dataset.records if SLICE_TAG in r["tags"]]
        assert tagged
        for record in dataset.records:
            assert (SLICE_MARKER in record["tokens"]) == (SLICE_TAG in record["tags"])
        assert slice_dataset(n=10, with_slice=False).schema["slices"] == []

    def test_scaling_splits(self):
        """测试扩展实验数据的 split 数量"""
        dataset = scaling_dataset(n_train=40, n_test=10, n_dev=5, seed=0)
        splits = [r["tags"][0] for r in dataset.records]
        assert (splits.count("train"), splits.count("dev"), splits.count("test")) == (40, 5, 10)
        assert all(len(r["supervision"]["Topic"]) == 1 for r in dataset.records if r["tags"] == ["test"])

    def test_write_dataset(self, tmp_path):
        """测试写出 schema.json 与 data.jsonl"""
        dataset = noisy_singleton(n=12, seed=0)
        schema_path, data_path = write_dataset(dataset, tmp_path / "out")
        assert json.loads(schema_path.read_text(encoding="utf-8")) == dataset.schema
        lines = data_path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 12
        assert json.loads(lines[0]) == dataset.records[0]
        assert [json.loads(l)["tags"] for l in lines] == [r["tags"] for r in dataset.records]
