import os
from typing import Optional
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from WSCompiler.utils.errors import ConfigError


class RuntimeConfig(BaseModel):
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1, description="Parallelism cap")
    log_level: str = Field(default="INFO", description="Log level")
    log_file: Optional[str] = Field(default=None, description="Optional log file")
    record_timing: bool = Field(default=False, description="Write wall-clock columns into CSV artifacts")


class LabelModelConfig(BaseModel):
    max_iters: int = Field(default=500, ge=1, description="Maximum EM iterations")
    tol: float = Field(default=1e-10, ge=0.0, description="Stop when log-likelihood gain is below this")


class TrainDefaults(BaseModel):
    slice_indicator_weight: float = Field(default=1.0, ge=0.0, description="Indicator head loss weight")
    slice_expert_weight: float = Field(default=1.0, ge=0.0, description="Expert head loss weight")
    rebalance: bool = Field(default=True, description="Rebalance classes in the task loss")


class Config(BaseModel):
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    label_model: LabelModelConfig = Field(default_factory=LabelModelConfig)
    train: TrainDefaults = Field(default_factory=TrainDefaults)


def _env_bool(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() == "true"


def load_config_from_env() -> Config:
    load_dotenv()
    try:
        runtime_config = RuntimeConfig(
            threads=int(os.getenv("WSC_THREADS")) if os.getenv("WSC_THREADS") else (os.cpu_count() or 1),
            log_level=os.getenv("WSC_LOG_LEVEL", "INFO").upper(),
            log_file=os.getenv("WSC_LOG_FILE"),
            record_timing=_env_bool("WSC_RECORD_TIMING")
        )

        label_model_config = LabelModelConfig(
            max_iters=int(os.getenv("WSC_EM_MAX_ITERS", "500")),
            tol=float(os.getenv("WSC_EM_TOL", "1e-10"))
        )

        train_defaults = TrainDefaults(
            slice_indicator_weight=float(os.getenv("WSC_SLICE_INDICATOR_WEIGHT", "1.0")),
            slice_expert_weight=float(os.getenv("WSC_SLICE_EXPERT_WEIGHT", "1.0")),
            rebalance=_env_bool("WSC_REBALANCE", "true")
        )
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"Invalid environment configuration: {e}")

    return Config(
        runtime=runtime_config,
        label_model=label_model_config,
        train=train_defaults
    )

