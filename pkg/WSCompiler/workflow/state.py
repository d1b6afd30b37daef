from typing import Any, Dict, List, Optional, TypedDict

from WSCompiler.labels.artifacts import TaskLabels
from WSCompiler.monitor.monitor import Report
from WSCompiler.schema.schema import Schema, TuningSpec
from WSCompiler.search.search import TrialResult
from WSCompiler.store.codec import RecordError
from WSCompiler.store.rowstore import RowStore
from WSCompiler.training.trainer import TrainedModel


class PipelineState(TypedDict):
    # Inputs
    schema_path: str  # schema 文件
    data_path: str    # JSONL 数据文件
    out_dir: str      # 输出目录
    seed: int         # 全局随机种子
    budget: Optional[int]  # 覆盖 tuning.budget

    # Ingest
    schema: Optional[Schema]
    tuning: Optional[TuningSpec]  # 生效的 tuning（已替换 seed/budget）
    store: Optional[RowStore]
    record_errors: List[RecordError]  # 被跳过的行

    # Supervision
    labels: Dict[str, TaskLabels]  # 每个任务的 label model 产物

    # Model selection
    trials: List[TrialResult]  # 所有 trial，按 trial_id 排序
    best_trial: Optional[int]
    model: Optional[TrainedModel]

    # Monitoring
    report: Optional[Report]

    # Outputs
    artifacts: Dict[str, str]  # 产物名 -> 路径
    provenance: Optional[Dict[str, Any]]

    current_step: str  # 当前步骤


def initial_state(schema_path: str, data_path: str, out_dir: str, seed: int = 0,
                  budget: Optional[int] = None) -> PipelineState:
    return PipelineState(
        schema_path=str(schema_path),
        data_path=str(data_path),
        out_dir=str(out_dir),
        seed=seed,
        budget=budget,
        schema=None,
        tuning=None,
        store=None,
        record_errors=[],
        labels={},
        trials=[],
        best_trial=None,
        model=None,
        report=None,
        artifacts={},
        provenance=None,
        current_step="initialized"
    )
