import argparse
import json
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from WSCompiler.synthetic.generators import GENERATORS
from WSCompiler.utils.config import Config

DEFAULT_FRACTIONS = "0.03125,0.0625,0.125,0.25,0.5,1"


@dataclass
class CLIConfig:
    threads: Optional[int] = None
    log_level: Optional[str] = None
    log_file: Optional[str] = None
    record_timing: bool = False
    show_steps: bool = False

    # 命令行参数优先于环境变量
    def apply(self, config: Config) -> Config:
        runtime = config.runtime.model_copy(update={
            k: v for k, v in {
                "threads": self.threads,
                "log_level": self.log_level.upper() if self.log_level else None,
                "log_file": self.log_file,
                "record_timing": True if self.record_timing else None,
            }.items() if v is not None
        })
        return config.model_copy(update={"runtime": runtime})


console = Console()


def print_separator(char: str = "─", length: int = 70) -> None:
    """打印分隔线"""
    console.print(f"[cyan]{char * length}[/cyan]")


def print_header(text: str) -> None:
    """打印标题"""
    console.print(Panel.fit(
        f"[bold cyan]{text}[/bold cyan]",
        border_style="cyan"
    ))


def print_trials(rows: List[Dict[str, Any]], best_trial: Optional[int]) -> None:
    """打印搜索结果表"""
    if not rows:
        return
    table = Table(title="search trials", show_lines=False)
    for column in rows[0]:
        table.add_column(str(column))
    for row in rows:
        style = "bold green" if best_trial is not None and row.get("trial_id") == best_trial else None
        table.add_row(*[str(v) for v in row.values()], style=style)
    console.print(table)


def parse_params(values: Optional[List[str]]) -> Dict[str, Any]:
    """--param key=value；value 按 JSON 解析，失败则当作字符串。"""
    params: Dict[str, Any] = {}
    for item in values or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--param expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            params[key.strip()] = json.loads(raw)
        except ValueError:
            params[key.strip()] = raw
    return params


def parse_floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def parse_ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=int, default=None, help="并行上限（默认：WSC_THREADS 或 CPU 核数）")
    parser.add_argument("--log-level", default=None, help="日志级别（默认：WSC_LOG_LEVEL 或 INFO）")
    parser.add_argument("--log-file", default=None, help="额外写入的日志文件")
    parser.add_argument("--record-timing", action="store_true", default=False,
                        help="在 CSV 产物里写入耗时列（会破坏逐字节可复现）")
    parser.add_argument("--show-steps", action="store_true", default=False, help="显示流水线每一步")


def parse_args(argv: Any) -> argparse.Namespace:
    """解析命令行参数"""
    parser = argparse.ArgumentParser(
        prog="wsc",
        description="WSCompiler - 从 schema 和多来源弱监督数据编译出切片感知的多任务模型"
    )
    parser.add_argument("--version", action="version", version="WSCompiler 0.1.0")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="校验 schema，可选校验数据文件")
    p.add_argument("--schema", required=True)
    p.add_argument("--data", default=None)
    _common(p)

    p = sub.add_parser("ingest", help="把 JSONL 写入行存储")
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True, help="行存储输出路径")
    _common(p)

    p = sub.add_parser("fit-labels", help="为每个任务拟合 label model")
    p.add_argument("--schema", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--task", action="append", default=None, help="只拟合指定任务（可重复）")
    p.add_argument("--seed", type=int, default=0)
    _common(p)

    p = sub.add_parser("train", help="按一个架构选择训练单个模型")
    p.add_argument("--schema", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="model.ovm 输出路径")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", default=None, help="覆盖超参数 key=value（可重复）")
    _common(p)

    p = sub.add_parser("search", help="随机搜索架构并保留最佳模型")
    p.add_argument("--schema", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="覆盖 tuning.seed")
    p.add_argument("--budget", type=int, default=None, help="覆盖 tuning.budget")
    _common(p)

    p = sub.add_parser("evaluate", help="按 tag 和切片评估模型")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--tags", default=None, help="逗号分隔（默认：train,test,dev 加全部切片）")
    p.add_argument("--out", required=True, help="报告输出路径")
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    _common(p)

    p = sub.add_parser("report", help="把 report.csv/json 渲染成 markdown 摘要")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default=None, help="markdown 输出路径（默认：打印到终端）")
    _common(p)

    p = sub.add_parser("scaling", help="在不同训练数据比例下测量相对质量")
    p.add_argument("--schema", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="scaling.csv 输出路径")
    p.add_argument("--fractions", type=parse_floats, default=parse_floats(DEFAULT_FRACTIONS))
    p.add_argument("--seeds", type=parse_ints, default=[0])
    p.add_argument("--param", action="append", default=None, help="覆盖超参数 key=value（可重复）")
    _common(p)

    p = sub.add_parser("predict", help="对记录文件逐条预测，结果写到标准输出")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="单个 JSON 对象或 JSONL 文件")
    _common(p)

    p = sub.add_parser("gen-synthetic", help="生成合成 schema 和数据")
    p.add_argument("--kind", required=True, choices=sorted(GENERATORS))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=None, help="记录数（默认随类型而定）")
    p.add_argument("--seed", type=int, default=0)
    _common(p)

    p = sub.add_parser("pipeline", help="ingest -> fit-labels -> search/train -> evaluate -> export")
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=None, help="覆盖 tuning.budget")
    _common(p)

    return parser.parse_args(argv)


def cli_config_from_args(args: argparse.Namespace) -> CLIConfig:
    return CLIConfig(
        threads=args.threads,
        log_level=args.log_level,
        log_file=args.log_file,
        record_timing=args.record_timing,
        show_steps=args.show_steps,
    )
