"""
Offset-indexed binary row store.

File layout (little-endian):
    "OVRS" | u32 version | u64 schema_hash | u64 count
    (count + 1) x u64 absolute row offsets (the last one is end of file)
    rows: u32 length + canonical JSON bytes
A sidecar `<store>.tags.json` holds the tag index.

Rows are written once by `ingest` and never mutated; every read after that
is lock-free except for optional access tracking.
"""

import json
import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

from WSCompiler.schema.schema import RESERVED_TAGS, Schema, schema_hash
from WSCompiler.store.codec import Record, RecordError, decode_record, encode_record, parse_record_line
from WSCompiler.utils.errors import (
    FatalFormatError, OutOfRange, RecordValidationError, StoreFormatError, StoreIoError
)
from WSCompiler.utils.hashing import canonical_bytes, sha256_bytes
from WSCompiler.utils.logger import get_logger

logger = get_logger(__name__)

MAGIC = b"OVRS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQQ")
OFFSET = struct.Struct("<Q")
ROW_LENGTH = struct.Struct("<I")


def tags_path(store_path: Union[str, Path]) -> Path:
    store_path = Path(store_path)
    return store_path.with_name(store_path.name + ".tags.json")


@dataclass
class RowStore:
    path: Path
    count: int
    tag_index: Dict[str, List[int]]
    schema_hash: int
    _buf: bytes = field(repr=False, default=b"")
    _offsets: Tuple[int, ...] = field(repr=False, default=())
    _access_log: Optional[Set[int]] = field(repr=False, default=None)
    _lock: threading.Lock = field(repr=False, default_factory=threading.Lock)

    @classmethod
    def open(cls, path: Union[str, Path]) -> "RowStore":
        path = Path(path)
        try:
            buf = path.read_bytes()
            tag_doc = json.loads(tags_path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise StoreIoError(f"Cannot read row store {path}: {e}")
        except ValueError as e:
            raise StoreFormatError(f"Corrupt tag index for {path}: {e}")

        if len(buf) < HEADER.size:
            raise StoreFormatError(f"{path} is too short to be a row store")
        magic, version, digest, count = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise StoreFormatError(f"{path} is not a row store (bad magic {magic!r})")
        if version != FORMAT_VERSION:
            raise StoreFormatError(f"{path} has unsupported format version {version}")
        table_end = HEADER.size + OFFSET.size * (count + 1)
        if len(buf) < table_end:
            raise StoreFormatError(f"{path} offset table is truncated")
        offsets = struct.unpack_from(f"<{count + 1}Q", buf, HEADER.size)
        if offsets[-1] != len(buf):
            raise StoreFormatError(f"{path} is truncated: expected {offsets[-1]} bytes, found {len(buf)}")
        if tag_doc.get("schema_hash") != digest:
            raise StoreFormatError(f"tag index of {path} belongs to another store")

        return cls(
            path=path,
            count=count,
            tag_index={k: list(v) for k, v in tag_doc["tags"].items()},
            schema_hash=digest,
            _buf=buf,
            _offsets=offsets
        )

    # 读取
    def get(self, row_id: int) -> Record:
        if not (0 <= row_id < self.count):
            raise OutOfRange(row_id, self.count)
        if self._access_log is not None:
            with self._lock:
                if self._access_log is not None:
                    self._access_log.add(row_id)
        start = self._offsets[row_id]
        (length,) = ROW_LENGTH.unpack_from(self._buf, start)
        body = self._buf[start + ROW_LENGTH.size:start + ROW_LENGTH.size + length]
        return decode_record(body)

    def records(self, row_ids: Iterable[int]) -> Iterator[Tuple[int, Record]]:
        for row_id in row_ids:
            yield row_id, self.get(row_id)

    def rows_with_tag(self, tag: str) -> List[int]:
        return list(self.tag_index.get(tag, []))

    @property
    def tags(self) -> List[str]:
        return sorted(self.tag_index)

    @property
    def digest(self) -> str:
        return sha256_bytes(self._buf)

    def check_schema(self, schema: Schema) -> None:
        if schema_hash(schema) != self.schema_hash:
            raise StoreFormatError(
                f"{self.path} was ingested with a different schema "
                f"(store {self.schema_hash:016x}, schema {schema_hash(schema):016x})"
            )

    @contextmanager
    def track_access(self) -> Iterator[Set[int]]:
        """记录期间读取过的行号，用于验证 search 没有碰 test 行。"""
        log: Set[int] = set()
        with self._lock:
            previous, self._access_log = self._access_log, log
        try:
            yield log
        finally:
            with self._lock:
                self._access_log = previous
                if previous is not None:
                    previous.update(log)


def rows_with_tag(store: RowStore, tag: str) -> List[int]:
    return store.rows_with_tag(tag)


def get(store: RowStore, row_id: int) -> Record:
    return store.get(row_id)


def _read_lines(source: Union[bytes, str, Path, BinaryIO]) -> List[bytes]:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, Path)):
        try:
            data = Path(source).read_bytes()
        except OSError as e:
            raise StoreIoError(f"Cannot read data file {source}: {e}")
    else:
        try:
            data = source.read()
        except OSError as e:
            raise StoreIoError(f"Cannot read data stream: {e}")
    return [line[:-1] if line.endswith(b"\r") else line for line in data.split(b"\n")]


def _write_store(path: Path, digest: int, rows: List[bytes], tag_index: Dict[str, List[int]]) -> None:
    count = len(rows)
    offset = HEADER.size + OFFSET.size * (count + 1)
    offsets = []
    for body in rows:
        offsets.append(offset)
        offset += ROW_LENGTH.size + len(body)
    offsets.append(offset)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(HEADER.pack(MAGIC, FORMAT_VERSION, digest, count))
            f.write(struct.pack(f"<{count + 1}Q", *offsets))
            for body in rows:
                f.write(ROW_LENGTH.pack(len(body)))
                f.write(body)
        os.replace(tmp, path)
        tags_path(path).write_bytes(canonical_bytes({"schema_hash": digest, "count": count, "tags": tag_index}))
    except OSError as e:
        raise StoreIoError(f"Cannot write row store {path}: {e}")


@dataclass
class IngestResult:
    store: RowStore
    errors: List[RecordError]


def ingest(schema: Schema, source: Union[bytes, str, Path, BinaryIO], store_path: Union[str, Path]) -> IngestResult:
    store_path = Path(store_path)
    rows: List[bytes] = []
    errors: List[RecordError] = []
    tag_index: Dict[str, List[int]] = {tag: [] for tag in RESERVED_TAGS}
    for tag in schema.slice_tags:
        tag_index[tag] = []

    total = 0
    for line_no, line in enumerate(_read_lines(source), start=1):
        if not line.strip():
            continue
        total += 1
        try:
            record = parse_record_line(schema, line)
        except RecordValidationError as e:
            errors.append(RecordError(line_no, e.kind, e.message))
            continue
        row_id = len(rows)
        rows.append(encode_record(record))
        for tag in record.tags:
            tag_index.setdefault(tag, []).append(row_id)

    if total and 2 * len(errors) > total:
        raise FatalFormatError(len(errors), total)
    if errors:
        logger.warning("ingest skipped %d of %d lines", len(errors), total)

    digest = schema_hash(schema)
    _write_store(store_path, digest, rows, tag_index)
    logger.info("ingested %d rows into %s", len(rows), store_path)
    return IngestResult(store=RowStore.open(store_path), errors=errors)


def check_records(schema: Schema, source: Union[bytes, str, Path, BinaryIO]) -> Tuple[int, List[RecordError]]:
    """Validate every line without writing a store: (non-empty lines, errors)."""
    total = 0
    errors: List[RecordError] = []
    for line_no, line in enumerate(_read_lines(source), start=1):
        if not line.strip():
            continue
        total += 1
        try:
            parse_record_line(schema, line)
        except RecordValidationError as e:
            errors.append(RecordError(line_no, e.kind, e.message))
    return total, errors
