"""Rule-based planning: AST -> logical plan -> optimized physical plan.

The logical plan is the canonical chain Scan -> Filter? -> WindowAgg? ->
MlApply? -> Project over a single table. Optimization applies, in order and
only when enabled: column pruning and filter pushdown (query_rewrite),
merging of window aggregates that share a (partition, order, frame) into one
pass (operator_fusion), and marking eligible aggregates to be answered from
the pre-aggregation index (preagg). With every flag off the physical plan is
a one-to-one translation of the logical plan and every aggregate runs as a
naive scan.

The WHERE predicate selects which anchor rows produce output; window
aggregates always see the key's full stored history. Filter placement
(pushed into the scan vs applied after aggregation) therefore changes cost,
never results. Window partition/order columns must be the table's key and
timestamp columns — events are stored per key in time order.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

from .errors import PlanError, TypeCheckError, UnknownColumnError, UnknownFunctionError
from .mlfuncs import MlRegistry
from .preagg import Structure, eligible_structure
from .schema import ColumnType, NUMERIC_TYPES, TableSchema
from .sqlfront import (
    CallItem,
    ColumnItem,
    Comparison,
    RowsFrame,
    SelectStmt,
    WindowAggItem,
    WindowSpec,
)

NAIVE_SCAN = "naive_scan"
PREAGG = "preagg"

FLAG_NAMES = ("query_rewrite", "operator_fusion", "plan_cache", "preagg", "parallel_exec")


@dataclass(frozen=True)
class OptimizationFlags:
    query_rewrite: bool = True
    operator_fusion: bool = True
    plan_cache: bool = True
    preagg: bool = True
    parallel_exec: bool = True

    @classmethod
    def all_on(cls) -> OptimizationFlags:
        return cls()

    @classmethod
    def all_off(cls) -> OptimizationFlags:
        return cls(**{name: False for name in FLAG_NAMES})

    @classmethod
    def from_names(cls, names) -> OptimizationFlags:
        unknown = set(names) - set(FLAG_NAMES)
        if unknown:
            raise ValueError(f"unknown optimization flags: {sorted(unknown)}")
        return cls(**{name: name in names for name in FLAG_NAMES})

    def without(self, flag: str) -> OptimizationFlags:
        if flag not in FLAG_NAMES:
            raise ValueError(f"unknown optimization flag {flag!r}")
        values = {name: getattr(self, name) for name in FLAG_NAMES}
        values[flag] = False
        return OptimizationFlags(**values)

    def enabled_names(self) -> tuple[str, ...]:
        return tuple(name for name in FLAG_NAMES if getattr(self, name))


def plan_fingerprint(normalized_text: str) -> str:
    return hashlib.sha256(normalized_text.encode()).hexdigest()


@dataclass(frozen=True)
class AggOutput:
    aggregate: str
    column: str
    name: str
    strategy: str  # NAIVE_SCAN | PREAGG
    structure: Structure


@dataclass(frozen=True)
class WindowGroup:
    """One windowed pass: every aggregate shares (partition, order, frame)."""

    partition_column: str
    order_column: str
    frame: object  # RowsFrame | RangeFrame
    aggs: tuple[AggOutput, ...]

    @property
    def strategy(self) -> str:
        return PREAGG if all(a.strategy == PREAGG for a in self.aggs) else NAIVE_SCAN


@dataclass(frozen=True)
class MlCall:
    function: str
    inputs: tuple[str, ...]  # feature output names or table columns
    input_kinds: tuple[str, ...]  # "feature" | "column"
    name: str


@dataclass(frozen=True)
class LogicalPlan:
    table: str
    schema: TableSchema
    scan_columns: tuple[str, ...]
    filter: Comparison | None
    window_specs: tuple[tuple[WindowSpec, str], ...]  # (spec, output name)
    ml_calls: tuple[MlCall, ...]
    output_names: tuple[str, ...]
    output_sources: tuple[tuple[str, str], ...]  # (kind, ref name) per output


@dataclass(frozen=True)
class PhysicalPlan:
    table: str
    schema: TableSchema
    scan_columns: tuple[str, ...]
    filter: Comparison | None
    filter_pushed: bool
    window_groups: tuple[WindowGroup, ...]
    ml_calls: tuple[MlCall, ...]
    output_names: tuple[str, ...]
    output_sources: tuple[tuple[str, str], ...]
    fingerprint: str
    flags: OptimizationFlags
    source_normalized: str

    def explain(self) -> str:
        lines: list[str] = []

        def emit(text: str) -> None:
            lines.append("  " * len(lines) + text)

        emit(f"Project[{', '.join(self.output_names)}]")
        if self.ml_calls:
            calls = ", ".join(
                f"{c.name}={c.function}({', '.join(c.inputs)})" for c in self.ml_calls
            )
            emit(f"MlApply[{calls}]")
        if self.filter is not None and not self.filter_pushed:
            emit(f"Filter[{self.filter.to_sql()}]")
        for group in self.window_groups:
            aggs = ",".join(f"{a.aggregate}({a.column})" for a in group.aggs)
            frame = _frame_text(group.frame)
            emit(
                f"WindowAgg[{frame}, strategy={group.strategy}, "
                f"partition={group.partition_column}, order={group.order_column}, aggs={aggs}]"
            )
        if self.filter is not None and self.filter_pushed:
            emit(f"Filter[{self.filter.to_sql()}, pushed]")
        emit(f"Scan[{self.table}, columns=({', '.join(self.scan_columns)})]")
        return "\n".join(lines)


def _frame_text(frame) -> str:
    if isinstance(frame, RowsFrame):
        text = f"w={frame.preceding} ROWS"
        if frame.include_current:
            text += "+current"
        return text
    return f"w={frame.duration_ms}ms RANGE"


def _unique_name(base: str, used: set[str]) -> str:
    name = base
    n = 2
    while name in used:
        name = f"{base}_{n}"
        n += 1
    used.add(name)
    return name


def build_logical(select: SelectStmt, catalog, ml_registry: MlRegistry) -> LogicalPlan:
    """Resolve and type-check the statement against the catalog.

    *catalog* is any object with a ``table(name)`` method raising
    ``UnknownTableError``; the returned table must expose ``schema``.
    """
    schema: TableSchema = catalog.table(select.table).schema
    columns = set(schema.column_names)

    def require_column(name: str, context: str) -> None:
        if name not in columns:
            raise UnknownColumnError(f"unknown column {name!r} in {context}")

    window_specs: list[tuple[WindowSpec, str]] = []
    ml_calls: list[MlCall] = []
    output_names: list[str] = []
    output_sources: list[tuple[str, str]] = []
    used_names: set[str] = set()
    feature_names: dict[str, str] = {}  # output name -> kind, for ML input resolution

    # window aggregates first: their outputs are referencable by ML calls
    for item in select.items:
        if not isinstance(item, WindowAggItem):
            continue
        wdef = select.window(item.window)
        require_column(item.column, f"{item.func}({item.column})")
        require_column(wdef.partition_by, "PARTITION BY")
        require_column(wdef.order_by, "ORDER BY")
        if wdef.partition_by != schema.key_column:
            raise PlanError(
                f"PARTITION BY must use the key column {schema.key_column!r}, "
                f"got {wdef.partition_by!r}"
            )
        if wdef.order_by != schema.ts_column:
            raise PlanError(
                f"ORDER BY must use the timestamp column {schema.ts_column!r}, "
                f"got {wdef.order_by!r}"
            )
        ctype = schema.col_type(item.column)
        if item.func != "COUNT" and ctype not in NUMERIC_TYPES:
            raise TypeCheckError(
                f"{item.func} requires a numeric column, {item.column!r} is {ctype.value}"
            )
        spec = WindowSpec(wdef.partition_by, wdef.order_by, wdef.frame, item.func, item.column)
        name = _unique_name(f"{item.func.lower()}_{item.column}", used_names)
        window_specs.append((spec, name))
        feature_names[name] = "window"

    win_i = 0
    for item in select.items:
        if isinstance(item, WindowAggItem):
            # already resolved above, in select-list order
            name = window_specs[win_i][1]
            win_i += 1
            output_names.append(name)
            output_sources.append(("window", name))
        elif isinstance(item, CallItem):
            fn = ml_registry.get(item.func)
            if fn is None:
                raise UnknownFunctionError(f"unknown function {item.func!r}")
            if fn.arity != len(item.args):
                raise TypeCheckError(
                    f"{item.func} expects {fn.arity} argument(s), got {len(item.args)}"
                )
            kinds = []
            for arg in item.args:
                if arg in feature_names:
                    kinds.append("feature")
                elif arg in columns:
                    if schema.col_type(arg) not in NUMERIC_TYPES:
                        raise TypeCheckError(
                            f"{item.func} argument {arg!r} must be numeric"
                        )
                    kinds.append("column")
                else:
                    raise UnknownColumnError(
                        f"{arg!r} is neither a column nor a feature output"
                    )
            name = _unique_name(item.func.lower(), used_names)
            ml_calls.append(MlCall(item.func, item.args, tuple(kinds), name))
            output_names.append(name)
            output_sources.append(("ml", name))
        else:
            require_column(item.name, "select list")
            name = _unique_name(item.name, used_names)
            output_names.append(name)
            output_sources.append(("column", item.name))

    if select.where is not None:
        require_column(select.where.column, "WHERE")
        ctype = schema.col_type(select.where.column)
        value = select.where.value
        if ctype is ColumnType.STRING and not isinstance(value, str):
            raise TypeCheckError(f"WHERE compares string column to {value!r}")
        if ctype is not ColumnType.STRING and isinstance(value, str):
            raise TypeCheckError(f"WHERE compares numeric column to string {value!r}")

    return LogicalPlan(
        table=select.table,
        schema=schema,
        scan_columns=schema.column_names,
        filter=select.where,
        window_specs=tuple(window_specs),
        ml_calls=tuple(ml_calls),
        output_names=tuple(output_names),
        output_sources=tuple(output_sources),
    )


def optimize(
    logical: LogicalPlan,
    flags: OptimizationFlags,
    source_normalized: str,
) -> tuple[PhysicalPlan, int]:
    """Apply the enabled rewrite rules; returns the plan and elapsed µs."""
    t0 = time.perf_counter_ns()
    schema = logical.schema

    # (1) column pruning
    if flags.query_rewrite:
        referenced: set[str] = set()
        for spec, _ in logical.window_specs:
            referenced.add(spec.column)
            referenced.add(spec.partition_column)
            referenced.add(spec.order_column)
        for call in logical.ml_calls:
            for arg, kind in zip(call.inputs, call.input_kinds):
                if kind == "column":
                    referenced.add(arg)
        for kind, ref in logical.output_sources:
            if kind == "column":
                referenced.add(ref)
        if logical.filter is not None:
            referenced.add(logical.filter.column)
        scan_columns = tuple(n for n in schema.column_names if n in referenced)
    else:
        scan_columns = schema.column_names

    # (1b) filter pushdown: evaluate the predicate during scan enumeration
    # when it touches only partition/order columns (always safe here, but the
    # rule fires per its stated condition)
    part_order = {c for spec, _ in logical.window_specs for c in (spec.partition_column, spec.order_column)}
    filter_pushed = bool(
        flags.query_rewrite
        and logical.filter is not None
        and (not logical.window_specs or logical.filter.column in part_order)
    )

    # (2) operator fusion: one pass per distinct (partition, order, frame)
    groups: list[list[tuple[WindowSpec, str]]] = []
    group_keys: dict[tuple, int] = {}
    for spec, name in logical.window_specs:
        gkey = (spec.partition_column, spec.order_column, spec.frame)
        if flags.operator_fusion and gkey in group_keys:
            groups[group_keys[gkey]].append((spec, name))
        else:
            group_keys[gkey] = len(groups)
            groups.append([(spec, name)])

    # (3) pre-aggregation marking
    window_groups = []
    for members in groups:
        aggs = []
        for spec, name in members:
            structure = eligible_structure(spec.aggregate, spec.frame.kind)
            use_preagg = flags.preagg and structure is not Structure.NAIVE
            aggs.append(
                AggOutput(
                    aggregate=spec.aggregate,
                    column=spec.column,
                    name=name,
                    strategy=PREAGG if use_preagg else NAIVE_SCAN,
                    structure=structure if use_preagg else Structure.NAIVE,
                )
            )
        first = members[0][0]
        window_groups.append(
            WindowGroup(first.partition_column, first.order_column, first.frame, tuple(aggs))
        )

    plan = PhysicalPlan(
        table=logical.table,
        schema=schema,
        scan_columns=scan_columns,
        filter=logical.filter,
        filter_pushed=filter_pushed,
        window_groups=tuple(window_groups),
        ml_calls=logical.ml_calls,
        output_names=logical.output_names,
        output_sources=logical.output_sources,
        fingerprint=plan_fingerprint(source_normalized),
        flags=flags,
        source_normalized=source_normalized,
    )
    return plan, (time.perf_counter_ns() - t0) // 1000
