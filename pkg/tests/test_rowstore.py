import copy
import json

import pytest

from WSCompiler.schema.schema import parse_schema
from WSCompiler.store.codec import RecordError, assign_split, parse_record, parse_record_line
from WSCompiler.store.rowstore import RowStore, check_records, ingest, tags_path
from WSCompiler.synthetic.generators import running_example
from WSCompiler.utils.errors import (
    FatalFormatError, OutOfRange, RecordValidationError, StoreFormatError, StoreIoError
)

RECORD = {
    "tokens": ["how", "tall", "is", "obama"],
    "entities": [{"id": "obama", "range": [3, 4]}],
    "supervision": {
        "Intent": [{"source": "keyword", "value": "height"}, {"source": "crowd", "value": "age"}],
        "EntityType": [{"source": "gazetteer", "value": [[], [], None, ["person"]]}],
        "IntentArg": [{"source": "rule", "value": "obama"}, {"source": "crowd", "value": 0}],
    },
    "tags": ["train"],
}


def _schema():
    return parse_schema(json.dumps(running_example(n=1).schema))


def _record(**changes):
    record = copy.deepcopy(RECORD)
    record.update(changes)
    return record


def _lines(*records):
    return "".join(json.dumps(r) + "\n" for r in records).encode("utf-8")


class TestParseRecord:
    """测试记录校验"""

    def setup_method(self):
        self.schema = _schema()

    def _kind(self, obj):
        with pytest.raises(RecordValidationError) as exc:
            parse_record(self.schema, obj)
        return exc.value.kind

    def test_valid_record(self):
        """测试合法记录"""
        record = parse_record(self.schema, _record())
        assert record.payloads["tokens"] == ["how", "tall", "is", "obama"]
        assert record.payloads["entities"] == [{"id": "obama", "range": [3, 4]}]
        assert record.payloads["query"] is None
        assert [v.source for v in record.supervision["Intent"]] == ["keyword", "crowd"]
        assert record.tags == ["train"]

    def test_split_assigned_when_missing(self):
        """测试没有 split tag 时按哈希分配"""
        record = parse_record(self.schema, _record(tags=["vip"]))
        assert record.tags[0] == "vip"
        assert record.split() in ("train", "dev", "test")
        again = parse_record(self.schema, _record(tags=["vip"]))
        assert again.tags == record.tags

    def test_assign_split_distribution(self):
        """测试哈希分配大致是 80/10/10"""
        counts = {"train": 0, "dev": 0, "test": 0}
        for i in range(2000):
            record = parse_record(self.schema, _record(tokens=["tok", str(i)], entities=[], supervision={},
                                                       tags=["dev"]))
            record.tags = []
            counts[assign_split(record)] += 1
        assert 1450 < counts["train"] < 1750
        assert 120 < counts["dev"] < 280
        assert 120 < counts["test"] < 280

    def test_null_payload(self):
        """测试 payload 为 null"""
        record = parse_record(self.schema, {"tokens": None, "entities": None, "tags": ["test"]})
        assert record.payloads["tokens"] is None
        assert record.supervision == {}

    def test_unknown_field(self):
        """测试未知字段"""
        assert self._kind(_record(extra=1)) == "UnknownField"

    def test_bad_span(self):
        """测试越界的 span"""
        assert self._kind(_record(entities=[{"id": "obama", "range": [3, 9]}])) == "BadSpan"
        assert self._kind(_record(entities=[{"id": "obama", "range": [2, 2]}])) == "BadSpan"

    def test_unknown_element_key(self):
        """测试 set 元素的未知键"""
        assert self._kind(_record(entities=[{"id": "obama", "color": "red"}])) == "BadValue"

    def test_per_token_vote_length(self):
        """测试逐 token 投票长度不符"""
        supervision = copy.deepcopy(RECORD["supervision"])
        supervision["EntityType"] = [{"source": "gazetteer", "value": [[], ["person"]]}]
        assert self._kind(_record(supervision=supervision)) == "GranularityMismatch"

    def test_unknown_label(self):
        """测试不在标签集里的投票"""
        supervision = {"Intent": [{"source": "keyword", "value": "weight"}]}
        assert self._kind(_record(supervision=supervision)) == "BadVote"

    def test_duplicate_source(self):
        """测试同一来源重复投票"""
        supervision = {"Intent": [{"source": "a", "value": "age"}, {"source": "a", "value": "none"}]}
        assert self._kind(_record(supervision=supervision)) == "DuplicateSource"

    def test_select_vote(self):
        """测试 select 投票的下标与 id"""
        assert self._kind(_record(supervision={"IntentArg": [{"source": "a", "value": 1}]})) == "BadVote"
        assert self._kind(_record(supervision={"IntentArg": [{"source": "a", "value": "lincoln"}]})) == "BadVote"
        no_candidates = _record(entities=[], supervision={"IntentArg": [{"source": "a", "value": 0}]})
        assert self._kind(no_candidates) == "GranularityMismatch"

    def test_unknown_task(self):
        """测试未知任务"""
        assert self._kind(_record(supervision={"Topic": []})) == "UnknownTask"

    def test_multiple_splits(self):
        """测试一条记录带多个 split tag"""
        assert self._kind(_record(tags=["train", "test"])) == "MultipleSplits"

    def test_bad_json_line(self):
        """测试非法 JSON 行"""
        with pytest.raises(RecordValidationError) as exc:
            parse_record_line(self.schema, b"{not json")
        assert exc.value.kind == "BadJson"

    def test_deeply_nested_line(self):
        """测试嵌套过深的行按 BadJson 处理"""
        line = b"[" * 100000 + b"]" * 100000
        with pytest.raises(RecordValidationError) as exc:
            parse_record_line(self.schema, line)
        assert exc.value.kind == "BadJson"


class TestRowStore:
    """测试行存储"""

    def setup_method(self):
        self.schema = _schema()

    def test_ingest_and_read(self, tmp_path):
        """测试写入后按行读取"""
        records = [_record(tags=[t]) for t in ("train", "dev", "test")]
        result = ingest(self.schema, _lines(*records), tmp_path / "s.ovrs")
        store = result.store
        assert result.errors == []
        assert store.count == 3
        assert store.rows_with_tag("dev") == [1]
        assert store.get(2).tags == ["test"]
        assert store.get(0).supervision["IntentArg"][1].value == 0
        assert tags_path(store.path).exists()

    def test_skipped_lines(self, tmp_path):
        """测试坏行被跳过并带行号上报"""
        data = _lines(_record(), _record(extra=1)) + b"\n" + _lines(_record(), _record())
        result = ingest(self.schema, data, tmp_path / "s.ovrs")
        assert result.store.count == 3
        assert result.errors == [RecordError(2, "UnknownField", result.errors[0].message)]
        assert str(result.errors[0]).startswith("line 2: UnknownField")

    def test_deeply_nested_line_skipped(self, tmp_path):
        """测试嵌套过深的行被跳过，其余行照常写入"""
        data = _lines(_record(), _record(), _record(), _record()) + b"[" * 100000 + b"]" * 100000 + b"\n"
        result = ingest(self.schema, data, tmp_path / "s.ovrs")
        assert result.store.count == 4
        assert [(e.line, e.kind) for e in result.errors] == [(5, "BadJson")]
        total, errors = check_records(self.schema, data)
        assert total == 5 and [e.kind for e in errors] == ["BadJson"]

    def test_fatal_format(self, tmp_path):
        """测试超过一半的行被拒绝时整体失败"""
        data = _lines(_record(), _record(extra=1), _record(extra=2), _record(extra=3))
        with pytest.raises(FatalFormatError) as exc:
            ingest(self.schema, data, tmp_path / "s.ovrs")
        assert (exc.value.rejected, exc.value.total) == (3, 4)

    def test_slice_tags_indexed(self, tmp_path):
        """测试 schema 中声明的 slice tag 即使为空也在索引里"""
        doc = running_example(n=1).schema
        doc["slices"] = [{"tag": "rare"}]
        schema = parse_schema(json.dumps(doc))
        store = ingest(schema, _lines(_record()), tmp_path / "s.ovrs").store
        assert "rare" in store.tags
        assert store.rows_with_tag("rare") == []
        assert store.rows_with_tag("never-seen") == []

    def test_out_of_range(self, tmp_path):
        """测试越界行号"""
        store = ingest(self.schema, _lines(_record()), tmp_path / "s.ovrs").store
        with pytest.raises(OutOfRange):
            store.get(1)
        with pytest.raises(IndexError):
            store.get(-1)

    def test_deterministic_bytes(self, tmp_path):
        """测试同样的输入得到同样的字节"""
        data = _lines(*[_record(tags=[]) for _ in range(3)])
        a = ingest(self.schema, data, tmp_path / "a.ovrs").store
        b = ingest(self.schema, data, tmp_path / "b.ovrs").store
        assert a.digest == b.digest
        assert tags_path(a.path).read_bytes() == tags_path(b.path).read_bytes()

    def test_open_rejects_truncated(self, tmp_path):
        """测试截断的文件"""
        path = tmp_path / "s.ovrs"
        ingest(self.schema, _lines(_record(), _record()), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(StoreFormatError):
            RowStore.open(path)

    def test_open_rejects_bad_magic(self, tmp_path):
        """测试错误的文件头"""
        path = tmp_path / "s.ovrs"
        ingest(self.schema, _lines(_record()), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(StoreFormatError):
            RowStore.open(path)

    def test_open_missing(self, tmp_path):
        """测试不存在的文件"""
        with pytest.raises(StoreIoError):
            RowStore.open(tmp_path / "missing.ovrs")

    def test_check_schema(self, tmp_path):
        """测试 store 与 schema 不匹配"""
        store = ingest(self.schema, _lines(_record()), tmp_path / "s.ovrs").store
        store.check_schema(self.schema)
        doc = running_example(n=1).schema
        doc["tuning"]["seed"] = 7
        with pytest.raises(StoreFormatError):
            store.check_schema(parse_schema(json.dumps(doc)))

    def test_track_access(self, tmp_path):
        """测试访问记录"""
        store = ingest(self.schema, _lines(_record(), _record(), _record()), tmp_path / "s.ovrs").store
        store.get(0)
        with store.track_access() as seen:
            store.get(2)
            list(store.records([1]))
        store.get(0)
        assert seen == {1, 2}

    def test_ingest_from_path(self, tmp_path):
        """测试从文件路径读取"""
        data_path = tmp_path / "data.jsonl"
        data_path.write_bytes(_lines(_record(), _record()))
        assert ingest(self.schema, data_path, tmp_path / "s.ovrs").store.count == 2
        with pytest.raises(StoreIoError):
            ingest(self.schema, tmp_path / "missing.jsonl", tmp_path / "t.ovrs")

    def test_check_records(self, tmp_path):
        """测试只校验不写入"""
        total, errors = check_records(self.schema, _lines(_record(), _record(tags=["x", "dev", "test"])))
        assert total == 2
        assert [e.line for e in errors] == [2]
        assert list(tmp_path.iterdir()) == []
