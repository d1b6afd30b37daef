import json

import pytest

from WSCompiler.schema.schema import parse_schema
from WSCompiler.store.rowstore import ingest
from WSCompiler.utils.hashing import canonical_json


@pytest.fixture
def build_store(tmp_path):
    """把合成数据集 ingest 到 tmp_path，返回 (schema, store)"""
    def _build(dataset, name: str = "store.ovrs"):
        schema = parse_schema(json.dumps(dataset.schema))
        data = "".join(canonical_json(r) + "\n" for r in dataset.records).encode("utf-8")
        result = ingest(schema, data, tmp_path / name)
        return schema, result.store
    return _build
