"""In-memory, per-key, time-ordered event storage with memory accounting.

Ingest enforces per-key timestamp monotonicity (ties allowed, ordered by
insertion) and an engine-wide byte ceiling; a rejected ingest leaves state
untouched. Writers hold a per-table lock; readers never lock — they snapshot
the per-key event count, and ingest publishes the pre-aggregation update and
the record before that count moves, so every visible index is consistent.
"""

from __future__ import annotations

import threading
from array import array
from bisect import bisect_left, bisect_right
from dataclasses import dataclass

from .errors import (
    DuplicateTableError,
    OutOfOrderError,
    ResourceExhaustedError,
    UnknownTableError,
)
from .preagg import PreAggIndex
from .schema import (
    NUMERIC_TYPES,
    RecordValues,
    TableSchema,
    record_bytes,
    validate_record,
)
from .sqlfront import Frame, RangeFrame, RowsFrame


class MemoryAccount:
    """Engine-wide accounted-byte ledger with a hard ceiling."""

    def __init__(self, bytes_limit: int):
        if bytes_limit <= 0:
            raise ValueError("bytes_limit must be positive")
        self.bytes_limit = bytes_limit
        self.bytes_used = 0
        self.high_water = 0
        self._lock = threading.Lock()

    def try_add(self, n: int) -> bool:
        with self._lock:
            if self.bytes_used + n > self.bytes_limit:
                return False
            self.bytes_used += n
            if self.bytes_used > self.high_water:
                self.high_water = self.bytes_used
            return True


class KeySegment:
    """Time-ordered events of one key; seq is the position (append-only)."""

    __slots__ = ("key", "events", "ts")

    def __init__(self, key):
        self.key = key
        self.events: list[RecordValues] = []
        self.ts = array("q")


@dataclass
class TableStats:
    row_count: int
    key_count: int
    bytes_used: int


class Table:
    __slots__ = ("schema", "segments", "lock", "bytes_used", "row_count", "preagg", "_rejected")

    def __init__(self, schema: TableSchema, bucket_size: int, with_preagg: bool):
        self.schema = schema
        self.segments: dict[object, KeySegment] = {}
        self.lock = threading.Lock()
        self.bytes_used = schema.metadata_bytes()
        self.row_count = 0
        self._rejected = 0
        indexed = tuple(n for n, t in schema.columns if t in NUMERIC_TYPES)
        self.preagg = PreAggIndex(indexed, bucket_size) if with_preagg else None

    @property
    def indexed_columns(self) -> tuple[str, ...]:
        return self.preagg.indexed_columns if self.preagg is not None else ()


class StorageEngine:
    """Catalog of tables plus the shared memory account."""

    def __init__(
        self,
        bytes_limit: int = 1 << 30,
        bucket_size: int = 256,
        maintain_preagg: bool = True,
    ):
        self._tables: dict[str, Table] = {}
        self._catalog_lock = threading.Lock()
        self.account = MemoryAccount(bytes_limit)
        self.bucket_size = bucket_size
        self.maintain_preagg = maintain_preagg

    # -- catalog ----------------------------------------------------------

    def create_table(self, schema: TableSchema) -> str:
        schema.check()
        with self._catalog_lock:
            if schema.name in self._tables:
                raise DuplicateTableError(f"table {schema.name!r} already exists")
            meta = schema.metadata_bytes()
            if not self.account.try_add(meta):
                raise ResourceExhaustedError(
                    f"table metadata ({meta} bytes) would exceed the memory limit"
                )
            self._tables[schema.name] = Table(schema, self.bucket_size, self.maintain_preagg)
        return schema.name

    def table(self, table_id: str) -> Table:
        t = self._tables.get(table_id)
        if t is None:
            raise UnknownTableError(f"unknown table {table_id!r}")
        return t

    def table_names(self) -> list[str]:
        return sorted(self._tables)

    # -- writes ----------------------------------------------------------

    def ingest(self, table_id: str, raw) -> int:
        """Append one record; returns the per-key insertion seq."""
        table = self.table(table_id)
        schema = table.schema
        values = validate_record(schema, raw)
        key = values[schema.key_index]
        ts = values[schema.ts_index]
        size = record_bytes(schema, values)
        with table.lock:
            seg = table.segments.get(key)
            if seg is not None and seg.ts and ts < seg.ts[-1]:
                table._rejected += 1
                raise OutOfOrderError(
                    f"timestamp {ts} is older than latest {seg.ts[-1]} for key {key!r}"
                )
            if not self.account.try_add(size):
                table._rejected += 1
                raise ResourceExhaustedError(
                    f"record ({size} bytes) would exceed the memory limit"
                )
            if seg is None:
                seg = KeySegment(key)
                table.segments[key] = seg
            # publish order matters for lock-free readers: index first, then
            # the record, then the timestamp that makes both visible
            if table.preagg is not None:
                col_values = {
                    name: float(values[schema.col_index(name)])
                    for name in table.preagg.indexed_columns
                }
                table.preagg.on_ingest(key, col_values, ts)
            seq = len(seg.events)
            seg.ts.append(ts)
            seg.events.append(values)
            table.bytes_used += size
            table.row_count += 1
        return seq

    # -- reads ------------------------------------------------------------

    def scan_window(self, table_id: str, key, t: int, frame: Frame) -> list[RecordValues]:
        """Records of *key* inside *frame* relative to *t*, time-ascending.

        ROWS frames with a 1-PRECEDING upper bound return the W records
        strictly before *t*; with CURRENT ROW they also include records at
        *t* (W+1 in total). RANGE frames cover timestamps in (t - d, t].
        Unknown keys yield an empty list.
        """
        table = self.table(table_id)
        seg = table.segments.get(key)
        if seg is None:
            return []
        n = len(seg.events)
        ts = seg.ts
        if isinstance(frame, RowsFrame):
            if frame.include_current:
                hi = bisect_right(ts, t, 0, n)
                lo = max(hi - (frame.preceding + 1), 0)
            else:
                hi = bisect_left(ts, t, 0, n)
                lo = max(hi - frame.preceding, 0)
        elif isinstance(frame, RangeFrame):
            lo = bisect_right(ts, t - frame.duration_ms, 0, n)
            hi = bisect_right(ts, t, 0, n)
        else:
            raise TypeError(f"unsupported frame {frame!r}")
        return seg.events[lo:hi]

    def segment_snapshot(self, table_id: str, key) -> tuple[list[RecordValues], array, int]:
        """(events, timestamps, visible-count) for lock-free consistent reads."""
        table = self.table(table_id)
        seg = table.segments.get(key)
        if seg is None:
            return [], array("q"), 0
        n = len(seg.events)
        return seg.events, seg.ts, n

    def keys(self, table_id: str) -> list:
        return sorted(self.table(table_id).segments)

    def snapshot_stats(self, table_id: str) -> TableStats:
        table = self.table(table_id)
        with table.lock:
            return TableStats(table.row_count, len(table.segments), table.bytes_used)

    def stats(self) -> dict:
        return {
            "tables": {
                name: {
                    "row_count": t.row_count,
                    "key_count": len(t.segments),
                    "bytes_used": t.bytes_used,
                    "rejected": t._rejected,
                }
                for name, t in sorted(self._tables.items())
            },
            "bytes_used": self.account.bytes_used,
            "bytes_limit": self.account.bytes_limit,
            "bytes_high_water": self.account.high_water,
        }
