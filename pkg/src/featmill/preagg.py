"""Incremental pre-aggregation: per-key prefix sums and bucketed partials.

Maintained on the ingest path, one update per indexed column per record.
A windowed SUM over the last W events is answered as a difference of two
prefix values instead of an O(W) scan; MIN/MAX and time-range windows
combine sealed-bucket partials with short boundary scans.

Prefix sums are kept as compensated (hi, lo) float pairs so that the
difference of two prefixes does not lose the window's value to cancellation
when the running total is much larger than the window sum.
"""

from __future__ import annotations

import math
import struct
from array import array
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from enum import Enum

DEFAULT_BUCKET_SIZE = 256

_FORMAT_TAG = 1  # serialization format version


def two_sum(a: float, b: float) -> tuple[float, float]:
    """Error-free transform: returns (s, e) with s = fl(a+b) and a+b = s+e."""
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


class Structure(Enum):
    PREFIX = "prefix"
    BUCKET = "bucket"
    NAIVE = "naive"


def eligible_structure(aggregate: str, frame_kind: str) -> Structure:
    """Total mapping from (aggregate, frame kind) to the backing structure.

    SUM/AVG/COUNT over ROWS frames read the prefix series; MIN/MAX over ROWS
    frames and every aggregate over RANGE frames read the bucket partials;
    anything unrecognized falls back to the naive scan.
    """
    if frame_kind == "ROWS":
        if aggregate in ("SUM", "AVG", "COUNT"):
            return Structure.PREFIX
        if aggregate in ("MIN", "MAX"):
            return Structure.BUCKET
    elif frame_kind == "RANGE":
        if aggregate in ("SUM", "AVG", "COUNT", "MIN", "MAX"):
            return Structure.BUCKET
    return Structure.NAIVE


@dataclass
class SumResult:
    sum: float
    count: int


@dataclass
class MinMaxResult:
    min: float | None
    max: float | None
    count: int
    touched: int  # elements scanned + bucket partials consumed


@dataclass
class RangeResult:
    value: float | int | None
    count: int
    touched: int


class _ColumnIndex:
    """Per-(key, column) state: raw values, compensated prefix, buckets."""

    __slots__ = ("values", "pre_hi", "pre_lo", "bucket_size", "sealed", "_run_hi", "_run_lo")

    def __init__(self, bucket_size: int):
        self.values = array("d")
        # prefix pairs: pre_hi[i] + pre_lo[i] ~= sum of the first i values
        self.pre_hi = array("d", [0.0])
        self.pre_lo = array("d", [0.0])
        self.bucket_size = bucket_size
        # sealed bucket partials, one tuple per full bucket of bucket_size
        # consecutive events: (min, max, count, sum_hi, sum_lo, ts_first, ts_last)
        self.sealed: list[tuple[float, float, int, float, float, int, int]] = []
        self._run_hi = 0.0
        self._run_lo = 0.0

    def append(self, value: float, ts: int, ts_all: array) -> None:
        # ts_all may not yet contain this event's timestamp (columns are
        # updated before the key's timestamp array on the ingest path).
        self.values.append(value)
        s, e = two_sum(self._run_hi, value)
        self._run_hi = s
        self._run_lo += e
        self.pre_hi.append(self._run_hi)
        self.pre_lo.append(self._run_lo)
        n = len(self.values)
        if n % self.bucket_size == 0:
            lo = n - self.bucket_size
            chunk = self.values[lo:n]
            hi_acc = 0.0
            lo_acc = 0.0
            for v in chunk:
                s, e = two_sum(hi_acc, v)
                hi_acc = s
                lo_acc += e
            ts_first = ts_all[lo] if lo < len(ts_all) else ts
            self.sealed.append(
                (min(chunk), max(chunk), self.bucket_size, hi_acc, lo_acc, ts_first, ts)
            )

    def window_sum(self, lo: int, hi: int) -> float:
        """Exact-to-rounding sum of values[lo:hi] via prefix differences."""
        if hi <= lo:
            return 0.0
        d, e = two_sum(self.pre_hi[hi], -self.pre_hi[lo])
        e += self.pre_lo[hi] - self.pre_lo[lo]
        return d + e

    def combine(self, lo: int, hi: int, want_minmax: bool, want_sum: bool):
        """Aggregate values[lo:hi] from sealed partials plus boundary scans.

        Sealed buckets whose index span lies wholly inside [lo, hi) are
        consumed as partials (one touch each, equivalent to time-range
        containment since timestamps are sorted); everything else, including
        the open tail, is scanned element by element.

        Returns (vmin, vmax, count, total, touched).
        """
        if hi <= lo:
            return None, None, 0, 0.0, 0
        b = self.bucket_size
        first_full = (lo + b - 1) // b
        last_full = min(hi // b, len(self.sealed))
        touched = 0
        vmin: float | None = None
        vmax: float | None = None
        parts: list[float] = []

        def scan(a: int, z: int) -> None:
            nonlocal vmin, vmax, touched
            for i in range(a, z):
                v = self.values[i]
                if want_minmax:
                    if vmin is None or v < vmin:
                        vmin = v
                    if vmax is None or v > vmax:
                        vmax = v
                if want_sum:
                    parts.append(v)
                touched += 1

        if first_full >= last_full:
            scan(lo, hi)
        else:
            scan(lo, first_full * b)
            for k in range(first_full, last_full):
                bmin, bmax, _, shi, slo, _, _ = self.sealed[k]
                if want_minmax:
                    if vmin is None or bmin < vmin:
                        vmin = bmin
                    if vmax is None or bmax > vmax:
                        vmax = bmax
                if want_sum:
                    parts.append(shi)
                    parts.append(slo)
                touched += 1
            scan(last_full * b, hi)

        total = math.fsum(parts) if want_sum and parts else 0.0
        return vmin, vmax, hi - lo, total, touched


class _KeyIndex:
    __slots__ = ("ts", "columns")

    def __init__(self):
        self.ts = array("q")
        self.columns: dict[str, _ColumnIndex] = {}


class PreAggIndex:
    """Per-table index over every numeric column, updated once per ingest.

    Writers call ``on_ingest`` under the table's ingest lock. Column arrays
    are extended before the key's timestamp array, so a reader that derives
    index bounds from the timestamp array always finds prefix entries and
    values for every index it computes, even while a writer is appending.
    """

    def __init__(self, indexed_columns: tuple[str, ...], bucket_size: int = DEFAULT_BUCKET_SIZE):
        if bucket_size < 1:
            raise ValueError("bucket_size must be >= 1")
        self.indexed_columns = indexed_columns
        self.bucket_size = bucket_size
        self._keys: dict[object, _KeyIndex] = {}

    def on_ingest(self, key, column_values: dict[str, float], ts: int) -> None:
        ki = self._keys.get(key)
        if ki is None:
            ki = _KeyIndex()
            for col in self.indexed_columns:
                ki.columns[col] = _ColumnIndex(self.bucket_size)
            self._keys[key] = ki
        for col, value in column_values.items():
            ki.columns[col].append(value, ts, ki.ts)
        ki.ts.append(ts)

    # -- anchors --------------------------------------------------------------

    def events_before(self, key, t: int) -> int:
        """Number of events with timestamp strictly below *t*."""
        ki = self._keys.get(key)
        return 0 if ki is None else bisect_left(ki.ts, t)

    def events_at_or_before(self, key, t: int) -> int:
        ki = self._keys.get(key)
        return 0 if ki is None else bisect_right(ki.ts, t)

    # -- ROWS windows -----------------------------------------------------------

    def rows_window_sum(self, key, column: str, t_index: int, w: int) -> SumResult:
        ki = self._keys.get(key)
        if ki is None:
            return SumResult(0.0, 0)
        ci = ki.columns[column]
        t_index = min(t_index, len(ci.values))
        lo = max(t_index - w, 0)
        return SumResult(ci.window_sum(lo, t_index), t_index - lo)

    def rows_window_minmax(self, key, column: str, t_index: int, w: int) -> MinMaxResult:
        ki = self._keys.get(key)
        if ki is None:
            return MinMaxResult(None, None, 0, 0)
        ci = ki.columns[column]
        t_index = min(t_index, len(ci.values))
        lo = max(t_index - w, 0)
        vmin, vmax, count, _, touched = ci.combine(lo, t_index, want_minmax=True, want_sum=False)
        return MinMaxResult(vmin, vmax, count, touched)

    # -- RANGE windows ------------------------------------------------------------

    def range_window_agg(
        self,
        key,
        column: str | None,
        t: int,
        duration_ms: int,
        aggregate: str,
        limit: int | None = None,
    ) -> RangeResult:
        """Aggregate over events with timestamp in (t - duration, t].

        *limit* caps the visible event count (snapshot semantics for batch
        runs and for reads racing a concurrent ingest)."""
        ki = self._keys.get(key)
        if ki is None:
            return RangeResult(0 if aggregate in ("SUM", "COUNT") else None, 0, 0)
        lo = bisect_right(ki.ts, t - duration_ms)
        hi = bisect_right(ki.ts, t)
        if limit is not None:
            hi = min(hi, limit)
            lo = min(lo, hi)
        count = hi - lo
        if aggregate == "COUNT":
            return RangeResult(count, count, 0)
        if count == 0:
            return RangeResult(0.0 if aggregate == "SUM" else None, 0, 0)
        ci = ki.columns[column]
        want_sum = aggregate in ("SUM", "AVG")
        vmin, vmax, count, total, touched = ci.combine(
            lo, hi, want_minmax=not want_sum, want_sum=want_sum
        )
        if aggregate == "SUM":
            return RangeResult(total, count, touched)
        if aggregate == "AVG":
            return RangeResult(total / count, count, touched)
        return RangeResult(vmin if aggregate == "MIN" else vmax, count, touched)

    # -- serialization --------------------------------------------------------

    def serialize(self) -> bytes:
        """Length-prefixed binary snapshot of the whole index state."""
        out = bytearray()
        out.append(_FORMAT_TAG)
        keys = sorted(self._keys, key=lambda k: (isinstance(k, str), k))
        out.extend(struct.pack("<I", len(keys)))
        for key in keys:
            kb = (f"s:{key}" if isinstance(key, str) else f"i:{key}").encode()
            out.extend(struct.pack("<I", len(kb)))
            out.extend(kb)
            ki = self._keys[key]
            out.extend(struct.pack("<I", len(ki.ts)))
            out.extend(ki.ts.tobytes())
            for col in self.indexed_columns:
                ci = ki.columns[col]
                cb = col.encode()
                out.extend(struct.pack("<I", len(cb)))
                out.extend(cb)
                out.extend(struct.pack("<I", len(ci.values)))
                out.extend(ci.values.tobytes())
                out.extend(ci.pre_hi.tobytes())
                out.extend(ci.pre_lo.tobytes())
                out.extend(struct.pack("<I", len(ci.sealed)))
                for bucket in ci.sealed:
                    out.extend(struct.pack("<ddIddqq", *bucket))
        return bytes(out)
