"""Table schemas, record validation, and the record file formats.

Records are plain tuples in schema column order; the schema owns validation
and the deterministic byte-accounting used for the memory ceiling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Iterator

from .errors import InvalidSchemaError, SchemaMismatchError

# Accounted sizes are deliberately simple and deterministic: fixed widths for
# numerics, utf-8 length plus a header for strings, a constant per record.
RECORD_OVERHEAD_BYTES = 32
NUMERIC_BYTES = 8
STRING_OVERHEAD_BYTES = 16
TABLE_OVERHEAD_BYTES = 128
COLUMN_OVERHEAD_BYTES = 16


class ColumnType(Enum):
    INT64 = "int64"
    FLOAT64 = "float64"
    STRING = "string"
    TIMESTAMP = "timestamp"  # integer milliseconds since epoch


NUMERIC_TYPES = (ColumnType.INT64, ColumnType.FLOAT64)
KEY_TYPES = (ColumnType.STRING, ColumnType.INT64)

RecordValues = tuple  # one value per schema column, in schema order


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[tuple[str, ColumnType], ...]
    key_column: str
    ts_column: str

    def check(self) -> None:
        names = [n for n, _ in self.columns]
        if not self.name:
            raise InvalidSchemaError("table name must be non-empty")
        if len(set(names)) != len(names):
            raise InvalidSchemaError(f"duplicate column names in table {self.name!r}")
        if self.key_column not in names:
            raise InvalidSchemaError(f"key column {self.key_column!r} not in schema")
        if self.ts_column not in names:
            raise InvalidSchemaError(f"timestamp column {self.ts_column!r} not in schema")
        if self.col_type(self.key_column) not in KEY_TYPES:
            raise InvalidSchemaError(f"key column {self.key_column!r} must be string or int64")
        if self.col_type(self.ts_column) is not ColumnType.TIMESTAMP:
            raise InvalidSchemaError(f"timestamp column {self.ts_column!r} must be timestamp")

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)

    def col_index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.columns):
            if n == name:
                return i
        raise KeyError(name)

    def col_type(self, name: str) -> ColumnType:
        return self.columns[self.col_index(name)][1]

    @property
    def key_index(self) -> int:
        return self.col_index(self.key_column)

    @property
    def ts_index(self) -> int:
        return self.col_index(self.ts_column)

    def metadata_bytes(self) -> int:
        cost = TABLE_OVERHEAD_BYTES + len(self.name.encode())
        for name, _ in self.columns:
            cost += COLUMN_OVERHEAD_BYTES + len(name.encode())
        return cost

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "columns": [[n, t.value] for n, t in self.columns],
            "key_column": self.key_column,
            "ts_column": self.ts_column,
        }

    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> TableSchema:
        try:
            columns = tuple((str(n), ColumnType(t)) for n, t in spec["columns"])
            schema = cls(
                name=str(spec["name"]),
                columns=columns,
                key_column=str(spec["key_column"]),
                ts_column=str(spec["ts_column"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidSchemaError(f"bad schema spec: {exc}") from exc
        schema.check()
        return schema


def _coerce(value: Any, ctype: ColumnType, field: str) -> Any:
    if value is None:
        raise SchemaMismatchError(f"null value for column {field!r}", field=field)
    if ctype is ColumnType.INT64:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaMismatchError(f"column {field!r} expects int64, got {value!r}", field=field)
        return value
    if ctype is ColumnType.FLOAT64:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaMismatchError(f"column {field!r} expects float64, got {value!r}", field=field)
        return float(value)
    if ctype is ColumnType.STRING:
        if not isinstance(value, str):
            raise SchemaMismatchError(f"column {field!r} expects string, got {value!r}", field=field)
        return value
    # timestamp: integer milliseconds
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaMismatchError(
            f"column {field!r} expects timestamp millis, got {value!r}", field=field
        )
    if value < 0:
        raise SchemaMismatchError(f"column {field!r} timestamp must be >= 0", field=field)
    return value


def validate_record(schema: TableSchema, raw: Any) -> RecordValues:
    """Coerce *raw* (a sequence in schema order, or a name->value mapping)
    into a canonical value tuple, or raise ``SchemaMismatchError``."""
    if isinstance(raw, dict):
        extra = set(raw) - set(schema.column_names)
        if extra:
            raise SchemaMismatchError(f"unknown fields {sorted(extra)}", field=sorted(extra)[0])
        missing = [n for n in schema.column_names if n not in raw]
        if missing:
            raise SchemaMismatchError(f"missing fields {missing}", field=missing[0])
        seq = [raw[n] for n in schema.column_names]
    else:
        seq = list(raw)
        if len(seq) != len(schema.columns):
            raise SchemaMismatchError(
                f"expected {len(schema.columns)} values, got {len(seq)}",
                field=schema.column_names[0],
            )
    return tuple(_coerce(v, t, n) for v, (n, t) in zip(seq, schema.columns))


def record_bytes(schema: TableSchema, values: RecordValues) -> int:
    cost = RECORD_OVERHEAD_BYTES
    for v, (_, ctype) in zip(values, schema.columns):
        if ctype is ColumnType.STRING:
            cost += STRING_OVERHEAD_BYTES + len(v.encode())
        else:
            cost += NUMERIC_BYTES
    return cost


# -- ingestion file formats ---------------------------------------------------
#
# CSV: header row matching schema column names; float64 written with 17
# significant digits (round-trips bit-exactly). JSON-lines: one object per
# record; floats use shortest round-trip representation (also bit-exact).


def format_float(v: float) -> str:
    return format(v, ".17g")


def _parse_csv_value(text: str, ctype: ColumnType, field: str) -> Any:
    try:
        if ctype is ColumnType.INT64 or ctype is ColumnType.TIMESTAMP:
            return int(text)
        if ctype is ColumnType.FLOAT64:
            return float(text)
    except ValueError:
        raise SchemaMismatchError(f"cannot parse {text!r} for column {field!r}", field=field)
    return text


def read_records_csv(schema: TableSchema, path: str) -> Iterator[RecordValues]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != schema.column_names:
            raise SchemaMismatchError(
                f"CSV header {header!r} does not match schema columns {schema.column_names!r}"
            )
        for row in reader:
            if len(row) != len(schema.columns):
                raise SchemaMismatchError(f"row has {len(row)} fields")
            yield validate_record(
                schema,
                [_parse_csv_value(v, t, n) for v, (n, t) in zip(row, schema.columns)],
            )


def write_records_csv(schema: TableSchema, rows: Iterable[RecordValues], path: str) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.column_names)
        for values in rows:
            out = []
            for v, (_, ctype) in zip(values, schema.columns):
                out.append(format_float(v) if ctype is ColumnType.FLOAT64 else v)
            writer.writerow(out)
            n += 1
    return n


def read_records_jsonl(schema: TableSchema, path: str) -> Iterator[RecordValues]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise SchemaMismatchError(f"expected JSON object, got {type(obj).__name__}")
            yield validate_record(schema, obj)


def write_records_jsonl(schema: TableSchema, rows: Iterable[RecordValues], path: str) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for values in rows:
            fh.write(record_to_json(schema, values))
            fh.write("\n")
            n += 1
    return n


def record_to_json(schema: TableSchema, values: RecordValues) -> str:
    return json.dumps(dict(zip(schema.column_names, values)), separators=(",", ":"))
