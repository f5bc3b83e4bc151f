"""Plan execution: single-anchor online requests and whole-table batch runs.

One compiled plan serves both paths. An anchor is a (key, t) pair; window
aggregates read the key's stored history relative to t, never the operator
stream, so the WHERE predicate only selects which anchors produce output.
Anchor-context columns (bare columns, ML column inputs, value-column
predicates) resolve to the key's latest event at or before t, which keeps the
online and batch paths bit-identical even with duplicate timestamps.

Batch runs partition work by key across execution lanes and normalize output
to (key, t, seq) ascending, so results are invariant in the lane count.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from bisect import bisect_left, bisect_right
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import (
    DuplicateDeploymentError,
    PlanError,
    StalePlanError,
    UnknownDeploymentError,
)
from .mlfuncs import MlFunction, MlRegistry
from .plancache import PlanCache
from .planner import (
    NAIVE_SCAN,
    OptimizationFlags,
    PhysicalPlan,
    WindowGroup,
    build_logical,
    optimize,
)
from .schema import TableSchema, format_float
from .sqlfront import DeployStmt, RowsFrame, SelectStmt, normalize, parse
from .storage import StorageEngine


@dataclass(frozen=True)
class LatencyBreakdown:
    """Per-request timing decomposition in microseconds (monotonic clock).

    total covers the request-processing body (lookup/compile/execute);
    admission queueing is not part of the decomposition. Cache-hit and
    deployed requests report parse_us = plan_us = 0 by convention.
    """

    parse_us: int
    plan_us: int
    exec_us: int
    total_us: int

    def __post_init__(self):
        if min(self.parse_us, self.plan_us, self.exec_us, self.total_us) < 0:
            raise ValueError("negative latency component")
        if self.parse_us + self.plan_us + self.exec_us > self.total_us:
            raise ValueError("latency parts exceed total")

    def as_dict(self) -> dict:
        return {
            "parse_us": self.parse_us,
            "plan_us": self.plan_us,
            "exec_us": self.exec_us,
            "total_us": self.total_us,
        }


@dataclass(frozen=True)
class FeatureRow:
    key: object
    ts: int
    seq: int  # per-key event seq for batch rows; -1 for online requests
    names: tuple  # shared tuple, one object per plan
    values: tuple

    def by_name(self) -> dict:
        return dict(zip(self.names, self.values))


@dataclass
class Deployment:
    name: str
    source: str
    plan: PhysicalPlan
    created_at: float


@dataclass
class ConsistencyReport:
    checked: int
    mismatches: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not self.mismatches


class LanePool:
    """Bounded pool of execution lanes with in-flight accounting."""

    def __init__(self, lanes: int):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.lanes = lanes
        self._executor = ThreadPoolExecutor(max_workers=lanes, thread_name_prefix="lane")
        self._lock = threading.Lock()
        self._inflight = 0
        self.inflight_high_water = 0
        self.per_lane_counts: dict[str, int] = {}

    def submit(self, fn, *args) -> Future:
        def tracked():
            with self._lock:
                self._inflight += 1
                if self._inflight > self.inflight_high_water:
                    self.inflight_high_water = self._inflight
            try:
                return fn(*args)
            finally:
                name = threading.current_thread().name
                with self._lock:
                    self._inflight -= 1
                    self.per_lane_counts[name] = self.per_lane_counts.get(name, 0) + 1

        return self._executor.submit(tracked)

    def run(self, fn, *args):
        return self.submit(fn, *args).result()

    def shutdown(self, wait: bool = True) -> None:
        self._executor.shutdown(wait=wait)

    def stats(self) -> dict:
        with self._lock:
            return {
                "lanes": self.lanes,
                "inflight": self._inflight,
                "inflight_high_water": self.inflight_high_water,
                "per_lane_counts": dict(sorted(self.per_lane_counts.items())),
            }


@dataclass
class EngineConfig:
    flags: OptimizationFlags = field(default_factory=OptimizationFlags.all_on)
    bytes_limit: int = 1 << 30
    bucket_size: int = 256
    cache_capacity: int = 256
    lanes: int = 8
    strict_w: bool = False  # Eq-1-literal AVG: divide by W even for partial windows
    include_default_ml: bool = True


_CMP = {
    "=": lambda a, b: a == b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
}


class FeatureEngine:
    """The unified engine: storage, planner, cache, ML registry, executor."""

    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self.flags = self.config.flags
        self.storage = StorageEngine(
            bytes_limit=self.config.bytes_limit,
            bucket_size=self.config.bucket_size,
            maintain_preagg=self.flags.preagg,
        )
        self.cache = PlanCache(self.config.cache_capacity)
        self.ml = MlRegistry(include_defaults=self.config.include_default_ml)
        self.lanes = LanePool(self.config.lanes if self.flags.parallel_exec else 1)
        self._deployments: dict[str, Deployment] = {}
        self._deploy_lock = threading.Lock()
        # memo of raw text -> normalized cache key, to skip re-tokenizing
        # repeated ad-hoc queries; bounded by periodic reset
        self._norm_memo: dict[str, str] = {}

    # -- catalog / ingest ---------------------------------------------------

    def create_table(self, schema: TableSchema) -> str:
        return self.storage.create_table(schema)

    def ingest(self, table_id: str, record) -> int:
        return self.storage.ingest(table_id, record)

    def register_ml_function(self, fn: MlFunction) -> None:
        self.ml.register(fn)

    # -- compilation ----------------------------------------------------------

    def _normalize(self, sql: str) -> str:
        norm = self._norm_memo.get(sql)
        if norm is None:
            norm = normalize(sql)
            if len(self._norm_memo) >= 1024:
                self._norm_memo.clear()
            self._norm_memo[sql] = norm
        return norm

    def compile(self, sql: str) -> tuple[PhysicalPlan, int, int, bool]:
        """Compile a SELECT; returns (plan, parse_us, plan_us, cache_hit)."""
        if self.flags.plan_cache:
            norm = self._normalize(sql)
            plan = self.cache.get(norm)
            if plan is not None:
                return plan, 0, 0, True
        stmt, parse_us = parse(sql)
        if isinstance(stmt, DeployStmt):
            raise PlanError("DEPLOY must go through the deploy operation")
        t0 = time.perf_counter_ns()
        logical = build_logical(stmt, self.storage, self.ml)
        norm = self._normalize(sql)
        plan, _ = optimize(logical, self.flags, norm)
        plan_us = (time.perf_counter_ns() - t0) // 1000
        if self.flags.plan_cache:
            self.cache.put(norm, plan)
        return plan, parse_us, plan_us, False

    def build_plan(self, select: SelectStmt, source: str) -> PhysicalPlan:
        logical = build_logical(select, self.storage, self.ml)
        plan, _ = optimize(logical, self.flags, normalize(source))
        return plan

    # -- deployments ----------------------------------------------------------

    def deploy(self, sql: str, name: str | None = None) -> Deployment:
        stmt, _ = parse(sql)
        if isinstance(stmt, DeployStmt):
            if name is not None and name != stmt.name:
                raise PlanError(
                    f"deployment name {name!r} conflicts with DEPLOY {stmt.name}"
                )
            name = stmt.name
            select = stmt.select
            source = stmt.select.to_sql()
        else:
            if name is None:
                raise PlanError("deployment needs a name")
            select = stmt
            source = sql
        with self._deploy_lock:
            if name in self._deployments:
                raise DuplicateDeploymentError(f"deployment {name!r} already exists")
            plan = self.build_plan(select, source)
            dep = Deployment(name, source, plan, created_at=time.time())
            self._deployments[name] = dep
            self.cache.pin(name, plan)
        return dep

    def deployment(self, name: str) -> Deployment:
        dep = self._deployments.get(name)
        if dep is None:
            raise UnknownDeploymentError(f"unknown deployment {name!r}")
        return dep

    def deployments(self) -> list[str]:
        return sorted(self._deployments)

    # -- online path ------------------------------------------------------------

    def request(self, name: str, key, t: int) -> tuple[FeatureRow, LatencyBreakdown]:
        """Execute a deployed query; parse and plan cost are zero by design."""
        t0 = time.perf_counter_ns()
        dep = self.deployment(name)
        row, exec_us = self._execute(dep.plan, key, t)
        total_us = (time.perf_counter_ns() - t0) // 1000
        return row, LatencyBreakdown(0, 0, exec_us, max(total_us, exec_us))

    def query(self, sql: str, key, t: int) -> tuple[FeatureRow, LatencyBreakdown]:
        """Ad-hoc path: compile (through the plan cache if enabled), execute."""
        t0 = time.perf_counter_ns()
        plan, parse_us, plan_us, _ = self.compile(sql)
        row, exec_us = self._execute(plan, key, t)
        total_us = (time.perf_counter_ns() - t0) // 1000
        return row, LatencyBreakdown(
            parse_us, plan_us, exec_us, max(total_us, parse_us + plan_us + exec_us)
        )

    def execute_request(self, plan: PhysicalPlan, key, t: int) -> tuple[FeatureRow, LatencyBreakdown]:
        row, exec_us = self._execute(plan, key, t)
        return row, LatencyBreakdown(0, 0, exec_us, exec_us)

    # -- core evaluation -------------------------------------------------------

    def _table_for(self, plan: PhysicalPlan):
        table = self.storage.table(plan.table)
        if table.schema is not plan.schema and table.schema != plan.schema:
            raise StalePlanError(f"table {plan.table!r} changed since the plan was built")
        return table

    def _execute(self, plan: PhysicalPlan, key, t: int) -> tuple[FeatureRow, int]:
        t0 = time.perf_counter_ns()
        table = self._table_for(plan)
        seg = table.segments.get(key)
        if seg is None:
            events, ts, n = [], (), 0
        else:
            events, ts, n = seg.events, seg.ts, len(seg.events)
        values = self._evaluate_anchor(plan, table, key, t, events, ts, n)
        if values is None:  # anchor filtered out
            values = (None,) * len(plan.output_names)
        row = FeatureRow(key, t, -1, plan.output_names, values)
        return row, (time.perf_counter_ns() - t0) // 1000

    def _evaluate_anchor(self, plan: PhysicalPlan, table, key, t: int, events, ts, n: int):
        """Returns the output tuple, or None when the filter rejects the anchor."""
        schema = plan.schema
        anchor_idx = bisect_right(ts, t, 0, n) - 1
        anchor = events[anchor_idx] if anchor_idx >= 0 else None

        def anchor_value(column: str):
            return anchor[schema.col_index(column)] if anchor is not None else None

        def filter_ok() -> bool:
            f = plan.filter
            v = anchor_value(f.column)
            return v is not None and _CMP[f.op](v, f.value)

        if plan.filter is not None and plan.filter_pushed and not filter_ok():
            return None

        features: dict[str, object] = {}
        for group in plan.window_groups:
            self._eval_group(group, table, key, t, ts, n, events, features)

        if plan.filter is not None and not plan.filter_pushed and not filter_ok():
            return None

        for call in plan.ml_calls:
            xs = [
                features[arg] if kind == "feature" else anchor_value(arg)
                for arg, kind in zip(call.inputs, call.input_kinds)
            ]
            fn = self.ml.get(call.function)
            features[call.name] = fn.evaluate(xs) if fn is not None else None

        out = []
        for kind, ref in plan.output_sources:
            out.append(anchor_value(ref) if kind == "column" else features[ref])
        return tuple(out)

    def _eval_group(self, group: WindowGroup, table, key, t: int, ts, n: int, events, features: dict) -> None:
        frame = group.frame
        if isinstance(frame, RowsFrame):
            if frame.include_current:
                hi = bisect_right(ts, t, 0, n)
                w = frame.preceding + 1
            else:
                hi = bisect_left(ts, t, 0, n)
                w = frame.preceding
            lo = max(hi - w, 0)
        else:
            lo = bisect_right(ts, t - frame.duration_ms, 0, n)
            hi = bisect_right(ts, t, 0, n)
            w = None

        preagg = table.preagg
        naive_cols: dict[str, list] = {}

        for agg in group.aggs:
            if agg.strategy != NAIVE_SCAN and preagg is not None:
                features[agg.name] = self._eval_preagg(
                    preagg, agg, key, t, frame, lo, hi, w
                )
                continue
            # naive scan: extract the column once per fused pass
            if agg.aggregate == "COUNT":
                features[agg.name] = hi - lo
                continue
            vals = naive_cols.get(agg.column)
            if vals is None:
                ci = table.schema.col_index(agg.column)
                vals = [events[i][ci] for i in range(lo, hi)]
                naive_cols[agg.column] = vals
            features[agg.name] = self._finalize(agg.aggregate, vals, frame, w)

    def _finalize(self, aggregate: str, vals: list, frame, w: int | None):
        if aggregate == "SUM":
            return math.fsum(vals) if vals else 0.0
        if not vals:
            return None
        if aggregate == "AVG":
            divisor = self._avg_divisor(len(vals), frame, w)
            return math.fsum(vals) / divisor
        if aggregate == "MIN":
            return float(min(vals))
        return float(max(vals))

    def _avg_divisor(self, count: int, frame, w: int | None) -> int:
        # strict mode restores the literal fixed-W denominator for ROWS frames
        if self.config.strict_w and isinstance(frame, RowsFrame) and w is not None:
            return w
        return count

    def _eval_preagg(self, preagg, agg, key, t: int, frame, lo: int, hi: int, w: int | None):
        if isinstance(frame, RowsFrame):
            if agg.aggregate in ("SUM", "AVG", "COUNT"):
                res = preagg.rows_window_sum(key, agg.column, hi, w)
                if agg.aggregate == "SUM":
                    return res.sum
                if agg.aggregate == "COUNT":
                    return res.count
                if res.count == 0:
                    return None
                return res.sum / self._avg_divisor(res.count, frame, w)
            res = preagg.rows_window_minmax(key, agg.column, hi, w)
            if res.count == 0:
                return None
            return res.min if agg.aggregate == "MIN" else res.max
        res = preagg.range_window_agg(key, agg.column, t, frame.duration_ms, agg.aggregate, limit=hi)
        if agg.aggregate == "SUM":
            return res.value if res.count else 0.0
        if agg.aggregate == "COUNT":
            return res.count
        return res.value if res.count else None

    # -- batch path ----------------------------------------------------------------

    def execute_batch(self, plan: PhysicalPlan, table_id: str, lanes: int = 1) -> list[FeatureRow]:
        """One FeatureRow per (key, event) anchor passing the filter,
        normalized to (key, t, seq) ascending regardless of lane count."""
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        if table_id != plan.table:
            raise PlanError(f"plan was built for table {plan.table!r}, not {table_id!r}")
        table = self._table_for(plan)
        keys = self.storage.keys(table_id)

        names = plan.output_names

        def run_key(key) -> list[FeatureRow]:
            events, ts, n = self.storage.segment_snapshot(table_id, key)
            rows: list[FeatureRow] = []
            for j in range(n):
                values = self._evaluate_anchor(plan, table, key, ts[j], events, ts, n)
                if values is not None:
                    rows.append(FeatureRow(key, ts[j], j, names, values))
            return rows

        if lanes == 1 or len(keys) <= 1:
            per_key = [run_key(k) for k in keys]
        else:
            with ThreadPoolExecutor(max_workers=lanes, thread_name_prefix="batch") as pool:
                per_key = list(pool.map(run_key, keys))
        out: list[FeatureRow] = []
        for rows in per_key:
            out.extend(rows)
        return out

    # -- consistency -------------------------------------------------------------

    def online_offline_consistency_check(
        self,
        plan: PhysicalPlan,
        table_id: str,
        sample: list[tuple],
        lanes: int = 1,
        batch_rows: list[FeatureRow] | None = None,
    ) -> ConsistencyReport:
        """Verify that the request path reproduces the batch rows at the
        sampled (key, t) anchors. *batch_rows* may be injected (test double)."""
        if batch_rows is None:
            batch_rows = self.execute_batch(plan, table_id, lanes)
        index: dict[tuple, tuple] = {}
        for row in batch_rows:
            index[(row.key, row.ts)] = row.values
        report = ConsistencyReport(checked=len(sample))
        for key, t in sample:
            row, _ = self.execute_request(plan, key, t)
            expected = index.get((key, t))
            if expected is None:
                if any(v is not None for v in row.values):
                    report.mismatches.append(
                        {"key": key, "t": t, "expected": None, "got": row.values}
                    )
            elif row.values != expected:
                report.mismatches.append(
                    {"key": key, "t": t, "expected": expected, "got": row.values}
                )
        return report

    # -- stats ------------------------------------------------------------------

    def stats(self) -> dict:
        return {
            "storage": self.storage.stats(),
            "cache": self.cache.stats(),
            "lanes": self.lanes.stats(),
            "deployments": self.deployments(),
            "flags": list(self.flags.enabled_names()),
        }

    def close(self) -> None:
        self.lanes.shutdown()


# -- batch output formats -----------------------------------------------------


def write_rows_csv(names: tuple[str, ...], rows: list[FeatureRow], path: str) -> None:
    """CSV with key,ts prefix columns; nulls as empty fields."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("key", "ts") + names)
        for row in rows:
            out = [row.key, row.ts]
            for v in row.values:
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(format_float(v))
                else:
                    out.append(v)
            writer.writerow(out)


def write_rows_jsonl(names: tuple[str, ...], rows: list[FeatureRow], path: str) -> None:
    """JSON-lines with key/ts fields; nulls as JSON null."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            obj = {"key": row.key, "ts": row.ts}
            obj.update(zip(names, row.values))
            fh.write(json.dumps(obj, separators=(",", ":")))
            fh.write("\n")
