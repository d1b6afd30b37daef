import functools
import logging
import sys
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Union
from rich.logging import RichHandler
from rich.console import Console
from rich.markup import escape

ROOT_LOGGER = "WSCompiler"


# 初始化日志系统，CLI 启动时调用
def setup_logger(
    name: str = ROOT_LOGGER,
    level: Union[int, str] = logging.INFO,
    log_file: Optional[str] = None,
    use_rich: bool = True
) -> logging.Logger:
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    logger = logging.getLogger(name)  # 同名 logger 全局单例
    logger.setLevel(level)
    logger.handlers = []

    if use_rich:
        console_handler = RichHandler(
            console=Console(stderr=True),
            rich_tracebacks=True,
            markup=False,
            show_time=True,
            show_path=False
        )
    else:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        ))
    console_handler.setLevel(level)
    logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        ))
        logger.addHandler(file_handler)

    return logger


def get_logger(name: str = ROOT_LOGGER) -> logging.Logger:
    if name != ROOT_LOGGER and not name.startswith(ROOT_LOGGER + "."):
        name = f"{ROOT_LOGGER}.{name}"
    return logging.getLogger(name)


# 日志能力模块，允许多继承
class LoggerMixin:
    @property
    def logger(self) -> logging.Logger:
        return logging.getLogger(f"{ROOT_LOGGER}.{self.__class__.__name__}")


@contextmanager
def _stage_timer(stage: str, logger: logging.Logger):
    start = time.perf_counter()
    logger.info("stage %s started", stage)
    try:
        yield
    except Exception:
        logger.warning("stage %s failed after %.2fs", stage, time.perf_counter() - start)
        raise
    logger.info("stage %s finished in %.2fs", stage, time.perf_counter() - start)


class log_stage:
    """阶段计时：既可作装饰器也可作 with 语句。"""

    def __init__(self, stage: str, logger: Optional[logging.Logger] = None):
        self.stage = stage
        self.logger = logger or get_logger("stage")
        self._local = threading.local()

    def _stack(self) -> list:
        # 每个线程一个栈，同一实例可以嵌套或并发使用
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        return self._local.stack

    def __enter__(self):
        ctx = _stage_timer(self.stage, self.logger)
        self._stack().append(ctx)
        return ctx.__enter__()

    def __exit__(self, *exc_info):
        return self._stack().pop().__exit__(*exc_info)

    def __call__(self, func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            with _stage_timer(self.stage, self.logger):
                return func(*args, **kwargs)
        return wrapper


# 用户提示
console = Console()
def print_success(message: str):
    console.print(f"[green]✓[/green] {escape(message)}", highlight=False)

def print_error(message: str):
    console.print(f"[red]✗[/red] {escape(message)}", highlight=False)

def print_warning(message: str):
    console.print(f"[yellow]⚠[/yellow] {escape(message)}", highlight=False)

def print_info(message: str):
    console.print(f"[blue]ℹ[/blue] {escape(message)}", highlight=False)

def print_step(message: str):
    console.print(f"[cyan]▶[/cyan] {escape(message)}", highlight=False)
