import numpy as np
import pytest

from WSCompiler.labels.artifacts import (
    fit_task_labels, label_digests, labels_path, load_all_labels, load_labels, prob_labels, save_labels
)
from WSCompiler.labels.labelmodel import (
    ProbLabels, SourceModel, fit_em, majority_vote, posterior_labels, rebalance_weights, source_coverage
)
from WSCompiler.labels.matrix import ABSTAIN, LabelMatrix, UnitRef, build_label_matrix
from WSCompiler.schema.schema import TaskKind
from WSCompiler.synthetic.generators import label_model_votes, running_example
from WSCompiler.utils.config import LabelModelConfig
from WSCompiler.utils.errors import DegenerateMatrix, UnknownSource


def _matrix(votes, k=3, sources=None, kind=TaskKind.MULTICLASS):
    votes = np.asarray(votes, dtype=np.int64)
    n, m = votes.shape
    return LabelMatrix(
        task="t",
        kind=kind,
        units=[UnitRef(i) for i in range(n)],
        cardinality=np.full(n, k, dtype=np.int64),
        sources=sources or [f"s{j}" for j in range(m)],
        votes=votes
    )


class TestLabelMatrix:
    """测试从行存储构建投票矩阵"""

    def setup_method(self):
        self.dataset = running_example(n=20, seed=1)

    def test_units_per_task(self, build_store):
        """测试不同任务的单元粒度"""
        schema, store = build_store(self.dataset)
        rows = list(range(store.count))
        intent = build_label_matrix(store, schema, "Intent", rows)
        assert intent.units == [UnitRef(r) for r in rows]
        assert set(intent.cardinality) == {3}
        assert intent.sources == sorted(intent.sources)
        assert set(intent.sources) <= {"keyword", "crowd", "heuristic"}

        entity = build_label_matrix(store, schema, "EntityType", rows)
        n_tokens = sum(len(r["tokens"]) for r in self.dataset.records)
        assert entity.n_units == 3 * n_tokens
        assert set(entity.cardinality) == {2}

        arg = build_label_matrix(store, schema, "IntentArg", rows)
        assert set(arg.cardinality) == {2}

    def test_vote_values(self, build_store):
        """测试按名字、按位和按 id 的投票都落到正确的类别下标"""
        schema, store = build_store(self.dataset)
        rows = list(range(store.count))
        record = self.dataset.records[0]

        entity = build_label_matrix(store, schema, "EntityType", rows)
        col = entity.sources.index("gazetteer")
        person_token = next(t for t, bits in enumerate(record["supervision"]["EntityType"][0]["value"])
                            if bits == ["person"])
        index = {u: i for i, u in enumerate(entity.units)}
        assert entity.votes[index[UnitRef(0, person_token, 0)], col] == 1
        assert entity.votes[index[UnitRef(0, person_token, 1)], col] == 0

        arg = build_label_matrix(store, schema, "IntentArg", rows)
        col = arg.sources.index("rule")
        assert list(arg.votes[:, col]) == self.dataset.truth["IntentArg"]

    def test_subset_of_rows(self, build_store):
        """测试只取部分行"""
        schema, store = build_store(self.dataset)
        matrix = build_label_matrix(store, schema, "Intent", [3, 5])
        assert [u.row for u in matrix.units] == [3, 5]

    def test_coverage(self):
        """测试来源覆盖率"""
        matrix = _matrix([[0, ABSTAIN], [1, ABSTAIN], [ABSTAIN, 2], [0, 1]])
        assert source_coverage(matrix) == {"s0": 0.75, "s1": 0.5}
        assert list(matrix.voted_mask()) == [True, True, True, True]


class TestSourceModel:
    """测试 EM 估计来源准确率"""

    def test_recovers_accuracies(self):
        """测试在生成模型数据上还原准确率"""
        truth = (0.9, 0.75, 0.6)
        matrix, _ = label_model_votes(n=4000, k=3, accuracies=truth, abstain=0.2, seed=3)
        model = fit_em(matrix)
        for s, acc in zip(matrix.sources, truth):
            assert abs(model.accuracies[s] - acc) < 0.04
        assert np.allclose(model.class_prior, [1 / 3] * 3, atol=0.05)

    def test_log_likelihood_never_decreases(self):
        """测试对数似然单调不减"""
        matrix, _ = label_model_votes(n=800, k=4, accuracies=(0.8, 0.6, 0.5, 0.4), abstain=0.3, seed=5)
        model = fit_em(matrix, max_iters=200)
        history = np.asarray(model.history)
        assert np.all(np.diff(history) >= -1e-9)
        assert model.log_likelihood == history[-1]
        assert model.iterations <= 200

    def test_better_than_majority_vote(self):
        """测试加权后优于多数投票"""
        matrix, y = label_model_votes(n=3000, k=3, accuracies=(0.9, 0.7, 0.55), abstain=0.1, seed=11)
        model = fit_em(matrix)
        em = posterior_labels(model, matrix).hard()
        mv = majority_vote(matrix).hard()
        assert np.mean(em == y) >= np.mean(mv == y)

    def test_deterministic(self):
        """测试相同输入得到完全相同的结果"""
        matrix, _ = label_model_votes(n=500, k=3, accuracies=(0.8, 0.7), abstain=0.2, seed=2)
        a, b = fit_em(matrix), fit_em(matrix)
        assert a.accuracies == b.accuracies
        assert a.history == b.history

    def test_all_abstain(self):
        """测试全部弃权时报错"""
        with pytest.raises(DegenerateMatrix):
            fit_em(_matrix([[ABSTAIN, ABSTAIN], [ABSTAIN, ABSTAIN]]))

    def test_accuracy_bounds(self):
        """测试准确率保持在 (1/K, 1) 内"""
        matrix = _matrix([[0, 0], [1, 1], [2, 2]] * 10)
        model = fit_em(matrix)
        for acc in model.accuracies.values():
            assert 1 / 3 < acc < 1

    def test_select_task_uses_uniform_prior(self, build_store):
        """测试 select 任务不学习类别先验"""
        schema, store = build_store(running_example(n=30, seed=2))
        matrix = build_label_matrix(store, schema, "IntentArg", list(range(store.count)))
        model = fit_em(matrix)
        assert model.class_prior == []
        assert model.uniform_prior
        labels = posterior_labels(model, matrix)
        assert all(p is not None and p.size == 2 for p in labels.probs)


class TestPosterior:
    """测试后验与多数投票"""

    def setup_method(self):
        self.model = SourceModel(task="t", accuracies={"s0": 0.8, "s1": 0.6}, class_prior=[0.5, 0.3, 0.2],
                                 log_likelihood=0.0)

    def test_matches_bayes_rule(self):
        """测试与逐类枚举的贝叶斯公式一致"""
        votes = [[0, 1], [2, ABSTAIN], [1, 1]]
        labels = posterior_labels(self.model, _matrix(votes))
        prior = np.array([0.5, 0.3, 0.2])
        for row, p in zip(votes, labels.probs):
            expected = prior.copy()
            for v, acc in zip(row, (0.8, 0.6)):
                if v == ABSTAIN:
                    continue
                expected *= np.where(np.arange(3) == v, acc, (1 - acc) / 2)
            assert np.allclose(p, expected / expected.sum(), atol=1e-12)

    def test_abstained_units(self):
        """测试无人投票的单元标为弃权"""
        labels = posterior_labels(self.model, _matrix([[ABSTAIN, ABSTAIN], [0, ABSTAIN]]))
        assert labels.probs[0] is None
        assert list(labels.abstained()) == [True, False]
        assert list(labels.hard()) == [-1, 0]

    def test_unknown_source(self):
        """测试模型没见过的来源"""
        with pytest.raises(UnknownSource):
            posterior_labels(self.model, _matrix([[0, 1]], sources=["s0", "other"]))

    def test_majority_vote_ties(self):
        """测试平票取最小类别下标"""
        labels = majority_vote(_matrix([[2, 1], [2, 2], [ABSTAIN, ABSTAIN]]))
        assert list(labels.hard()) == [1, 2, -1]
        assert np.array_equal(labels.probs[0], [0.0, 1.0, 0.0])

    def test_rebalance_weights(self):
        """测试重新加权后各类别总权重相等"""
        probs = [np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]), None]
        labels = ProbLabels("t", [UnitRef(i) for i in range(4)], probs)
        weights = rebalance_weights(labels)
        assert np.allclose(weights, [0.75, 0.75, 1.5, 0.0])

    def test_subset(self):
        """测试按行取子集"""
        labels = ProbLabels("t", [UnitRef(0, 0), UnitRef(0, 1), UnitRef(1, 0)], [None, np.ones(2) / 2, None])
        assert labels.subset([0]).units == [UnitRef(0, 0), UnitRef(0, 1)]


class TestArtifacts:
    """测试 labels 产物"""

    def setup_method(self):
        self.dataset = running_example(n=40, seed=4)

    def test_save_and_load(self, build_store):
        """测试写出后读回"""
        schema, store = build_store(self.dataset)
        rows = store.rows_with_tag("train")
        _, fitted = fit_task_labels(store, schema, "Intent", rows, LabelModelConfig(), seed=9)
        path = save_labels(labels_path(store.path, "Intent"), fitted)
        assert path.name == "store.ovrs.Intent.labels.json"

        loaded = load_labels(path)
        assert loaded.model.accuracies == fitted.model.accuracies
        assert loaded.model.seed == 9
        assert loaded.labels.units == fitted.labels.units
        assert loaded.store_digest == store.digest
        assert loaded.digest == fitted.digest
        for a, b in zip(loaded.labels.probs, fitted.labels.probs):
            assert (a is None and b is None) or np.array_equal(a, b)

    def test_refit_is_byte_identical(self, build_store):
        """测试重复拟合得到相同字节"""
        schema, store = build_store(self.dataset)
        rows = store.rows_with_tag("train")
        _, a = fit_task_labels(store, schema, "EntityType", rows)
        _, b = fit_task_labels(store, schema, "EntityType", rows)
        assert a.to_bytes() == b.to_bytes()

    def test_load_all(self, build_store):
        """测试只读取已拟合的任务"""
        schema, store = build_store(self.dataset)
        _, fitted = fit_task_labels(store, schema, "IntentArg", store.rows_with_tag("train"))
        save_labels(labels_path(store.path, "IntentArg"), fitted)
        labels = load_all_labels(store.path, schema)
        assert list(labels) == ["IntentArg"]
        assert list(label_digests(labels)) == ["IntentArg"]
        assert prob_labels(labels)["IntentArg"].task == "IntentArg"
        assert 0 < fitted.coverage <= 1
