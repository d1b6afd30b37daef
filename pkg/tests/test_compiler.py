import copy
import json

import pytest

from WSCompiler.compiler.candidates import DEFAULTS, ArchChoice, enumerate_candidates
from WSCompiler.compiler.compiler import bind_shape, build_signature, check_shapes, compile, signature
from WSCompiler.compiler.ir import BATCH, ModelIR, OpKind, length_axis
from WSCompiler.schema.schema import TuningSpec, parse_schema
from WSCompiler.synthetic.generators import running_example
from WSCompiler.utils.errors import EmptySearchSpace, ShapeError, UnsupportedCombination
from WSCompiler.utils.hashing import VOCAB_BUCKETS

ENCODERS = ("mean_pool", "max_pool", "conv1d:3", "recurrent")


def _running(**changes):
    doc = copy.deepcopy(running_example(n=1).schema)
    doc.update(changes)
    return parse_schema(json.dumps(doc))


class TestCandidates:
    """测试候选架构枚举"""

    def test_budget_and_pinned(self):
        """测试数量等于预算且固定值不变"""
        tuning = TuningSpec(search_space={"encoder": ENCODERS, "hidden_dim": (8, 16)},
                            pinned={"epochs": 3}, budget=5, seed=1)
        candidates = enumerate_candidates(tuning)
        assert len(candidates) == 5
        assert all(c.epochs == 3 for c in candidates)
        assert len({json.dumps(c.values, sort_keys=True) for c in candidates}) == 5

    def test_pinned_overrides_search_space(self):
        """测试固定的键不参与搜索"""
        tuning = TuningSpec(search_space={"hidden_dim": (8, 16)}, pinned={"hidden_dim": 64}, budget=3)
        assert [c.hidden_dim for c in enumerate_candidates(tuning)] == [64, 64, 64]

    def test_budget_larger_than_space(self):
        """测试预算超过空间大小时先覆盖全部组合"""
        tuning = TuningSpec(search_space={"encoder": ENCODERS, "hidden_dim": (8, 16)}, budget=11, seed=4)
        candidates = enumerate_candidates(tuning)
        first = {json.dumps(c.values, sort_keys=True) for c in candidates[:8]}
        assert len(candidates) == 11
        assert len(first) == 8

    def test_deterministic(self):
        """测试相同种子得到相同候选"""
        tuning = TuningSpec(search_space={"encoder": ENCODERS, "learning_rate": (0.1, 0.3)}, budget=4, seed=9)
        assert enumerate_candidates(tuning) == enumerate_candidates(tuning)

    def test_empty_space_uses_defaults(self):
        """测试没有搜索空间时使用默认值"""
        (choice,) = enumerate_candidates(TuningSpec())
        for key, value in DEFAULTS.items():
            assert choice.get(key) == value

    def test_empty_value_list(self):
        """测试某个键没有可选值"""
        with pytest.raises(EmptySearchSpace):
            enumerate_candidates(TuningSpec(search_space={"hidden_dim": ()}, budget=2))

    def test_per_payload_encoder(self):
        """测试按 payload 指定编码器"""
        choice = ArchChoice.from_values({"encoder": "max_pool", "encoder.query": "conv1d:5"})
        assert choice.encoder_for("query") == ("conv1d", 5)
        assert choice.encoder_for("doc") == ("max_pool", 0)
        assert choice.resolved(["query"])["encoder.query"] == "conv1d:5"
        with pytest.raises(ValueError):
            ArchChoice.from_values({"hidden_dim": -1})


class TestCompile:
    """测试 schema 编译为 IR"""

    def setup_method(self):
        self.schema = _running()

    def test_node_names(self):
        """测试节点命名与任务输出"""
        ir = compile(self.schema, ArchChoice(values={"encoder": "mean_pool"}))
        ids = {n.id for n in ir.nodes}
        for node_id in ("tokens/embed", "entities/tokens/span_pool", "query/tokens/mean_pool",
                        "query/entities/mean_pool", "query/concat", "query/proj",
                        "Intent/logits", "EntityType/output", "IntentArg/logits"):
            assert node_id in ids
        assert ir.task_outputs == {"Intent": "Intent/output", "EntityType": "EntityType/output",
                                   "IntentArg": "IntentArg/output"}
        assert ir.node("IntentArg/logits").op == OpKind.CANDIDATE_SCORE
        assert ir.node("EntityType/output").op == OpKind.SIGMOID

    def test_output_shapes(self):
        """测试各任务输出的符号形状"""
        ir = compile(self.schema, ArchChoice(values={"embed_dim": 8, "hidden_dim": 4}))
        assert ir.node("Intent/output").shape == (BATCH, 3)
        assert ir.node("EntityType/output").shape == (BATCH, length_axis("tokens"), 3)
        assert ir.node("IntentArg/output").shape == (BATCH, length_axis("entities"))
        assert ir.param("tokens.embedding").shape == (VOCAB_BUCKETS, 8)
        assert ir.param("Intent/hidden.W").shape == (8, 4)

    @pytest.mark.parametrize("encoder", ENCODERS)
    def test_encoders(self, encoder):
        """测试每种编码器都能编译"""
        ir = compile(self.schema, ArchChoice(values={"encoder": encoder}))
        kind = encoder.split(":")[0]
        assert any(n.id.startswith(f"query/tokens/{kind}") for n in ir.nodes)
        check_shapes(ir)

    def test_signature_independent_of_choice(self):
        """测试服务签名不随架构选择变化"""
        sigs = {compile(self.schema, ArchChoice(values={"encoder": e, "hidden_dim": h})).signature.to_json()
                for e in ENCODERS for h in (4, 16)}
        assert len(sigs) == 1
        sig = build_signature(self.schema)
        assert sig.to_json() in sigs
        assert sig.task("IntentArg").inputs == ("entities", "tokens")
        assert sig.task("EntityType").output == "per-token per-bit probabilities"

    def test_explicit_embed_dim(self):
        """测试 payload 上声明的维度优先"""
        doc = copy.deepcopy(running_example(n=1).schema)
        doc["payloads"][0]["embed_dim"] = 6
        ir = compile(parse_schema(json.dumps(doc)), ArchChoice(values={"embed_dim": 10}))
        assert ir.param("tokens.embedding").shape == (VOCAB_BUCKETS, 6)
        assert ir.param("entities.embedding").shape == (VOCAB_BUCKETS, 10)

    def test_slice_blocks(self):
        """测试 slice 为非 select 任务加上专家与指示头"""
        schema = _running(slices=[{"tag": "rare"}, {"tag": "long", "tasks": ["Intent"]}])
        ir = compile(schema, ArchChoice())
        assert [b.tag for b in ir.slice_blocks["Intent"]] == [None, "rare", "long"]
        assert [b.tag for b in ir.slice_blocks["EntityType"]] == [None, "rare"]
        assert "IntentArg" not in ir.slice_blocks
        assert ir.node("Intent/combine").op == OpKind.SLICE_COMBINE
        assert ir.node("Intent/slice:rare/indicator").shape == (BATCH, 1)
        assert ir.signature == compile(self.schema, ArchChoice()).signature

    def test_slice_on_select_rejected(self):
        """测试 slice 明确指向 select 任务"""
        schema = _running(slices=[{"tag": "rare", "tasks": ["IntentArg"]}])
        with pytest.raises(UnsupportedCombination):
            compile(schema, ArchChoice())

    def test_set_without_span_rejected(self):
        """测试 set 引用 singleton"""
        doc = copy.deepcopy(running_example(n=1).schema)
        doc["payloads"].append({"name": "extra", "kind": "set", "inputs": [{"field": "extra"}, {"payload": "query"}]})
        with pytest.raises(UnsupportedCombination):
            compile(parse_schema(json.dumps(doc)), ArchChoice())

    def test_ir_json(self):
        """测试 IR 的 JSON 形式"""
        ir = compile(self.schema, ArchChoice(values={"encoder": "recurrent"}))
        again = ModelIR.from_json(ir.to_json())
        assert again == ir
        assert again.schema == self.schema
        assert signature(again) == ir.signature

    def test_compile_is_deterministic(self):
        """测试同样输入得到同样的 IR"""
        choice = ArchChoice(values={"encoder": "conv1d:3"})
        assert compile(self.schema, choice).to_json() == compile(self.schema, choice).to_json()


class TestShapeCheck:
    """测试静态形状检查"""

    def setup_method(self):
        self.ir = compile(_running(), ArchChoice(values={"embed_dim": 8}))

    def test_declared_shape_mismatch(self):
        """测试声明的形状与推断不符"""
        nodes = list(self.ir.nodes)
        nodes[0] = nodes[0].model_copy(update={"shape": nodes[0].shape[:-1] + (9,)})
        with pytest.raises(ShapeError):
            check_shapes(self.ir.model_copy(update={"nodes": tuple(nodes)}))

    def test_unused_parameter(self):
        """测试未被使用的参数"""
        extra = self.ir.params[0].model_copy(update={"name": "orphan"})
        with pytest.raises(ShapeError):
            check_shapes(self.ir.model_copy(update={"params": self.ir.params + (extra,)}))

    def test_bind_shape(self):
        """测试把符号维度换成具体大小"""
        shape = (BATCH, length_axis("tokens"), 3)
        assert bind_shape(shape, {"B": 2, length_axis("tokens"): 7}) == (2, 7, 3)
