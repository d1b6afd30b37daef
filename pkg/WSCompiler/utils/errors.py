from enum import Enum
from typing import Optional


# 退出码：0 成功，1 校验失败，2 运行时错误
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class WSCError(Exception):
    exit_code: int = EXIT_RUNTIME


# ---------- 校验类错误 ----------

class ValidationFailure(WSCError):
    exit_code = EXIT_VALIDATION


class ValidationKind(str, Enum):
    UNKNOWN_REF = "UnknownRef"
    CYCLE_DETECTED = "CycleDetected"
    DUPLICATE_NAME = "DuplicateName"
    EMPTY_LABEL_SET = "EmptyLabelSet"
    BAD_SLICE_TAG = "BadSliceTag"
    KIND_MISMATCH = "KindMismatch"
    BAD_VALUE = "BadValue"


class SchemaSyntaxError(ValidationFailure):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"SyntaxError at line {line}: {message}")


class SchemaValidationError(ValidationFailure):
    def __init__(self, kind: ValidationKind, path: str, message: str = ""):
        self.kind = kind
        self.path = path
        self.message = message
        detail = f": {message}" if message else ""
        super().__init__(f"{kind.value} at {path}{detail}")


class RecordValidationError(ValidationFailure):
    """单条记录不符合 schema，ingest 时转成 RecordError 上报。"""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        self.message = message
        super().__init__(f"{kind}: {message}")


class MissingPayload(ValidationFailure):
    def __init__(self, field: str):
        self.field = field
        super().__init__(f"MissingPayload: record has no field '{field}'")


class EmptyCandidateSet(ValidationFailure):
    def __init__(self, task: str, payload: str):
        self.task = task
        self.payload = payload
        super().__init__(f"EmptyCandidateSet: task '{task}' needs candidates in '{payload}'")


# ---------- 运行时错误 ----------

class ConfigError(WSCError):
    pass


class StoreIoError(WSCError):
    pass


class StoreFormatError(WSCError):
    pass


class FatalFormatError(WSCError):
    def __init__(self, rejected: int, total: int):
        self.rejected = rejected
        self.total = total
        super().__init__(
            f"FatalFormatError: {rejected} of {total} lines rejected, is this the right data file?"
        )


class OutOfRange(WSCError, IndexError):
    def __init__(self, row_id: int, count: int):
        self.row_id = row_id
        self.count = count
        super().__init__(f"OutOfRange: row {row_id} not in [0, {count})")


class GranularityMismatch(WSCError):
    pass


class DegenerateMatrix(WSCError):
    pass


class UnknownSource(WSCError):
    def __init__(self, source: str):
        self.source = source
        super().__init__(f"UnknownSource: '{source}' is not covered by the source model")


class ShapeError(WSCError):
    pass


class UnsupportedCombination(WSCError):
    pass


class EmptySearchSpace(WSCError):
    pass


class NonFiniteError(WSCError):
    def __init__(self, message: str, batch_id: Optional[int] = None):
        self.batch_id = batch_id
        where = f" (batch {batch_id})" if batch_id is not None else ""
        super().__init__(f"NonFiniteError{where}: {message}")


class EmptyTrainSet(WSCError):
    pass


class SearchFailed(WSCError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, WSCError):
        return exc.exit_code
    return EXIT_RUNTIME
