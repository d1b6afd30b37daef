import copy
import json
from unittest.mock import patch

import pytest

from WSCompiler.compiler.candidates import enumerate_candidates
from WSCompiler.labels.artifacts import fit_task_labels
from WSCompiler.schema.schema import parse_schema
from WSCompiler.search.search import RandomSearch, export_trials, run_search, trial_seed, trials_frame
from WSCompiler.store.rowstore import ingest
from WSCompiler.synthetic.generators import noisy_singleton
from WSCompiler.training.trainer import train as real_train
from WSCompiler.utils.errors import EmptyTrainSet, SearchFailed
from WSCompiler.utils.hashing import canonical_json


def _setup(tmp_path, n=200, budget=3):
    dataset = noisy_singleton(n=n, seed=6)
    doc = copy.deepcopy(dataset.schema)
    doc["tuning"]["search_space"] = {"hidden_dim": [8, 16], "learning_rate": [0.1, 0.3]}
    doc["tuning"]["pinned"] = {"encoder": "mean_pool", "embed_dim": 8, "epochs": 2, "batch_size": 32}
    doc["tuning"]["budget"] = budget
    doc["tuning"]["seed"] = 3
    schema = parse_schema(json.dumps(doc))
    data = "".join(canonical_json(r) + "\n" for r in dataset.records).encode("utf-8")
    store = ingest(schema, data, tmp_path / "store.ovrs").store
    labels = {"Label": fit_task_labels(store, schema, "Label", store.rows_with_tag("train"))[1].labels}
    return schema, store, labels


class TestTrialSeed:
    """测试 trial 种子"""

    def test_derived_from_tuning_seed(self):
        """测试种子由 (tuning seed, trial) 决定"""
        assert trial_seed(3, 0) == trial_seed(3, 0)
        assert trial_seed(3, 0) != trial_seed(3, 1)
        assert trial_seed(3, 0) != trial_seed(4, 0)
        assert 0 <= trial_seed(3, 7) < 2 ** 64


class TestRandomSearch:
    """测试随机搜索"""

    def test_runs_budget_trials(self, tmp_path):
        """测试 trial 数等于预算并选出最好的"""
        schema, store, labels = _setup(tmp_path)
        result = run_search(schema, store, labels)
        assert [t.trial_id for t in result.trials] == [0, 1, 2]
        assert [t.seed for t in result.trials] == [trial_seed(3, i) for i in range(3)]
        best = max(result.trials, key=lambda t: (t.dev_metric, -t.trial_id))
        assert result.best_trial == best.trial_id
        assert result.best is best.model
        assert all(t.model is None for t in result.trials if t.trial_id != best.trial_id)
        assert all(0.0 <= t.dev_metric <= 1.0 for t in result.trials)

    def test_never_reads_test_rows(self, tmp_path):
        """测试搜索过程不读取 test 行"""
        schema, store, labels = _setup(tmp_path, budget=2)
        test_rows = set(store.rows_with_tag("test"))
        assert test_rows
        with store.track_access() as seen:
            run_search(schema, store, labels)
        assert seen
        assert not seen & test_rows

    def test_deterministic_across_threads(self, tmp_path):
        """测试线程数不影响结果"""
        schema, store, labels = _setup(tmp_path, budget=2)
        a = run_search(schema, store, labels, threads=1)
        b = run_search(schema, store, labels, threads=2)
        assert [t.dev_metric for t in a.trials] == [t.dev_metric for t in b.trials]
        assert a.best_trial == b.best_trial
        assert a.best.params.digest == b.best.params.digest

    def test_failed_trial(self, tmp_path):
        """测试失败的 trial 被记录而不中断搜索"""
        schema, store, labels = _setup(tmp_path, budget=2)
        search = RandomSearch(schema, store, labels)
        choice = enumerate_candidates(schema.tuning)[0]
        with patch("WSCompiler.search.search.train", side_effect=EmptyTrainSet("no rows")):
            trial = search.run_trial(0, choice)
            assert trial.failed
            assert "no rows" in trial.error
            assert trial.dev_metric == 0.0
            with pytest.raises(EmptyTrainSet):
                search.run_trial(0, choice, raise_errors=True)
            with pytest.raises(SearchFailed):
                search.run()

    def test_unexpected_error_is_a_failed_trial(self, tmp_path):
        """测试非 WSCError 的异常只让单个 trial 失败"""
        schema, store, labels = _setup(tmp_path, budget=3)
        calls = []

        def flaky_train(*args, **kwargs):
            calls.append(1)
            if len(calls) == 1:
                raise FloatingPointError("overflow in matmul")
            return real_train(*args, **kwargs)

        with patch("WSCompiler.search.search.train", side_effect=flaky_train):
            result = run_search(schema, store, labels, threads=1)
        assert result.trials[0].failed
        assert "overflow in matmul" in result.trials[0].error
        assert result.best_trial in (1, 2)
        assert result.best is not None

        search = RandomSearch(schema, store, labels)
        empty = RandomSearch(schema, store, labels, tuning=schema.tuning.model_copy(update={"budget": 0}))
        with pytest.raises(SearchFailed):
            empty.run()

        with patch("WSCompiler.search.search.train", side_effect=ValueError("bad shape")):
            with pytest.raises(ValueError):
                search.run_trial(0, enumerate_candidates(schema.tuning)[0], raise_errors=True)
            with pytest.raises(SearchFailed):
                search.run()

    def test_slice_scores(self, tmp_path):
        """测试按 slice 的 dev 分数"""
        dataset = noisy_singleton(n=200, seed=6)
        doc = copy.deepcopy(dataset.schema)
        doc["slices"] = [{"tag": "vip"}]
        doc["tuning"]["pinned"]["epochs"] = 1
        for i, record in enumerate(dataset.records):
            if i % 3 == 0:
                record["tags"] = record["tags"] + ["vip"]
        schema = parse_schema(json.dumps(doc))
        data = "".join(canonical_json(r) + "\n" for r in dataset.records).encode("utf-8")
        store = ingest(schema, data, tmp_path / "store.ovrs").store
        labels = {"Label": fit_task_labels(store, schema, "Label", store.rows_with_tag("train"))[1].labels}
        trial = RandomSearch(schema, store, labels).run_trial(0, enumerate_candidates(schema.tuning)[0])
        assert ("Label", "vip") in trial.per_slice


class TestTrialsFrame:
    """测试 search.results.csv"""

    def test_columns(self, tmp_path):
        """测试列与计时列"""
        schema, store, labels = _setup(tmp_path, budget=2)
        result = run_search(schema, store, labels)
        df = trials_frame(schema, result.trials)
        assert list(df["trial_id"]) == [0, 1]
        for column in ("encoder.doc", "hidden_dim", "learning_rate", "dev_metric", "dev_Label", "error"):
            assert column in df.columns
        assert set(df["wall_time"]) == {""}
        timed = trials_frame(schema, result.trials, record_timing=True)
        assert all(float(v) >= 0 for v in timed["wall_time"])

    def test_export(self, tmp_path):
        """测试同样的结果写出同样的字节"""
        schema, store, labels = _setup(tmp_path, budget=2)
        trials = run_search(schema, store, labels).trials
        a = export_trials(schema, trials, tmp_path / "a.csv")
        b = export_trials(schema, trials, tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text(encoding="utf-8").splitlines()[0].startswith("trial_id,")
