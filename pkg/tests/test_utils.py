import logging
import threading

import pytest

from WSCompiler.utils.config import load_config_from_env
from WSCompiler.utils.errors import (
    EXIT_RUNTIME, EXIT_VALIDATION, ConfigError, EmptyCandidateSet, MissingPayload, NonFiniteError,
    SchemaValidationError, ShapeError, ValidationKind, exit_code_for
)
from WSCompiler.utils.hashing import VOCAB_BUCKETS, canonical_json, fnv1a64, sha256_file, token_buckets
from WSCompiler.utils.logger import LoggerMixin, get_logger, log_stage, setup_logger

ENV_KEYS = (
    "WSC_THREADS", "WSC_LOG_LEVEL", "WSC_LOG_FILE", "WSC_RECORD_TIMING", "WSC_EM_MAX_ITERS", "WSC_EM_TOL",
    "WSC_SLICE_INDICATOR_WEIGHT", "WSC_SLICE_EXPERT_WEIGHT", "WSC_REBALANCE",
)


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """清空 WSC_* 环境变量，并避免读到工作目录里的 .env"""
    for key in ENV_KEYS:
        monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)
    return monkeypatch


class TestConfig:
    """测试配置加载"""

    def test_defaults(self, clean_env):
        """测试没有环境变量时的默认值"""
        config = load_config_from_env()
        assert config.runtime.threads >= 1
        assert config.runtime.log_level == "INFO"
        assert not config.runtime.record_timing
        assert config.label_model.max_iters == 500
        assert config.label_model.tol == 1e-10
        assert config.train.rebalance
        assert config.train.slice_indicator_weight == 1.0

    def test_environment(self, clean_env):
        """测试环境变量覆盖"""
        clean_env.setenv("WSC_THREADS", "3")
        clean_env.setenv("WSC_LOG_LEVEL", "debug")
        clean_env.setenv("WSC_RECORD_TIMING", "true")
        clean_env.setenv("WSC_EM_MAX_ITERS", "50")
        clean_env.setenv("WSC_SLICE_EXPERT_WEIGHT", "0.5")
        clean_env.setenv("WSC_REBALANCE", "false")
        config = load_config_from_env()
        assert config.runtime.threads == 3
        assert config.runtime.log_level == "DEBUG"
        assert config.runtime.record_timing
        assert config.label_model.max_iters == 50
        assert config.train.slice_expert_weight == 0.5
        assert not config.train.rebalance

    @pytest.mark.parametrize("key,value", [("WSC_THREADS", "many"), ("WSC_THREADS", "0"), ("WSC_EM_TOL", "-1")])
    def test_bad_values(self, clean_env, key, value):
        """测试非法的环境变量"""
        clean_env.setenv(key, value)
        with pytest.raises(ConfigError):
            load_config_from_env()


class TestErrors:
    """测试错误类型与退出码"""

    def test_exit_codes(self):
        """测试校验失败退出码为 1，其余为 2"""
        assert exit_code_for(MissingPayload("tokens")) == EXIT_VALIDATION
        assert exit_code_for(EmptyCandidateSet("Arg", "entities")) == EXIT_VALIDATION
        assert exit_code_for(SchemaValidationError(ValidationKind.CYCLE_DETECTED, "payloads")) == EXIT_VALIDATION
        assert exit_code_for(ShapeError("bad")) == EXIT_RUNTIME
        assert exit_code_for(RuntimeError("boom")) == EXIT_RUNTIME

    def test_messages(self):
        """测试错误信息带上类型与位置"""
        err = SchemaValidationError(ValidationKind.UNKNOWN_REF, "tasks[0].payload", "no payload 'x'")
        assert str(err) == "UnknownRef at tasks[0].payload: no payload 'x'"
        assert "(batch 4)" in str(NonFiniteError("loss", batch_id=4))
        assert "batch" not in str(NonFiniteError("loss"))


class TestHashing:
    """测试哈希工具"""

    def test_fnv1a64(self):
        """测试 FNV-1a 64 位的已知值"""
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C

    def test_token_buckets(self):
        """测试 token 的两个桶在范围内且稳定"""
        buckets = token_buckets("obama")
        assert len(buckets) == 2
        assert all(0 <= b < VOCAB_BUCKETS for b in buckets)
        assert buckets == token_buckets("obama")
        assert buckets != token_buckets("lincoln")

    def test_canonical_json(self):
        """测试紧凑且键有序"""
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_sha256_file(self, tmp_path):
        """测试文件摘要"""
        path = tmp_path / "x.txt"
        path.write_bytes(b"abc")
        assert sha256_file(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


class TestLogger:
    """测试日志工具"""

    def test_get_logger_prefix(self):
        """测试 logger 名称统一加前缀"""
        assert get_logger("cli").name == "WSCompiler.cli"
        assert get_logger("WSCompiler.search").name == "WSCompiler.search"
        assert get_logger().name == "WSCompiler"

    def test_mixin(self):
        """测试 LoggerMixin 按类名命名"""
        class Worker(LoggerMixin):
            pass
        assert Worker().logger.name == "WSCompiler.Worker"

    def test_setup_logger(self, tmp_path):
        """测试日志级别与日志文件"""
        log_file = tmp_path / "logs" / "run.log"
        logger = setup_logger("WSCompiler.test_setup", level="warning", log_file=str(log_file), use_rich=False)
        assert logger.level == logging.WARNING
        assert len(logger.handlers) == 2
        logger.warning("written")
        for handler in logger.handlers:
            handler.flush()
        assert "written" in log_file.read_text(encoding="utf-8")
        for handler in logger.handlers:
            handler.close()
        logger.handlers = []

    def test_log_stage(self, caplog):
        """测试阶段计时的装饰器与上下文两种用法"""
        logger = get_logger("stage_test")

        @log_stage("decorated", logger)
        def work(x):
            return x * 2

        with caplog.at_level(logging.INFO, logger="WSCompiler.stage_test"):
            assert work(3) == 6
            with log_stage("block", logger):
                pass
            with pytest.raises(KeyError):
                with log_stage("broken", logger):
                    raise KeyError("x")
        messages = [r.getMessage() for r in caplog.records]
        assert "stage decorated started" in messages
        assert any(m.startswith("stage block finished") for m in messages)
        assert any(m.startswith("stage broken failed") for m in messages)

    def test_log_stage_reentrant(self, caplog):
        """测试同一个 log_stage 实例嵌套和多线程使用"""
        logger = get_logger("stage_reentrant")
        stage = log_stage("shared", logger)

        def work():
            with stage:
                with stage:
                    pass

        with caplog.at_level(logging.INFO, logger="WSCompiler.stage_reentrant"):
            work()
            threads = [threading.Thread(target=work) for _ in range(4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        messages = [r.getMessage() for r in caplog.records]
        assert messages.count("stage shared started") == 10
        assert sum(m.startswith("stage shared finished") for m in messages) == 10
        assert not any("failed" in m for m in messages)
