"""SQL subset frontend: tokenizer, recursive-descent parser, normalizer.

Supported statements: SELECT with window aggregates, scalar function calls
and bare columns over a single table, an optional WHERE comparison, named
WINDOW definitions, and DEPLOY <name> AS SELECT ... . Anything recognizably
SQL but outside this subset (JOIN, GROUP BY, ...) raises
``UnsupportedFeatureError``; everything else is a syntax error with an
offset and an expected-token set.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

from .errors import LexError, QuerySyntaxError, UnsupportedFeatureError

KEYWORDS = frozenset(
    """
    SELECT FROM WHERE WINDOW AS OVER PARTITION BY ORDER ROWS RANGE BETWEEN
    PRECEDING AND CURRENT ROW DEPLOY SUM AVG COUNT MIN MAX
    JOIN INNER LEFT RIGHT OUTER ON GROUP HAVING LIMIT UNION
    INSERT UPDATE DELETE CREATE DROP FOLLOWING UNBOUNDED
    """.split()
)

AGG_FUNCS = ("SUM", "AVG", "COUNT", "MIN", "MAX")

_UNSUPPORTED_STATEMENTS = frozenset({"INSERT", "UPDATE", "DELETE", "CREATE", "DROP"})
_UNSUPPORTED_TRAILING = frozenset(
    {"JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "GROUP", "HAVING", "LIMIT", "UNION", "ORDER"}
)

_DURATION_UNITS_MS = {"ms": 1, "s": 1_000, "m": 60_000, "h": 3_600_000}

KEYWORD = "keyword"
IDENT = "identifier"
NUMBER = "number"
STRING = "string"
SYMBOL = "symbol"

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<number>\d+(?:\.\d+)?[A-Za-z]*)
      | (?P<word>[A-Za-z_][A-Za-z_0-9]*)
      | (?P<string>'(?:[^']|'')*')
      | (?P<symbol><=|>=|[(),=<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str  # verbatim slice of the input
    offset: int  # byte offset of the first character


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"illegal character {text[pos]!r}", offset=pos)
        if m.lastgroup != "ws":
            raw = m.group()
            if m.lastgroup == "word":
                kind = KEYWORD if raw.upper() in KEYWORDS else IDENT
            elif m.lastgroup == "string":
                kind = STRING
            else:
                kind = m.lastgroup  # number | symbol
            tokens.append(Token(kind, raw, pos))
        pos = m.end()
    return tokens


def normalize(text: str) -> str:
    """Canonical cache-key text: keywords upper-cased, whitespace collapsed
    to single spaces, identifiers and literals preserved verbatim.
    Never raises; idempotent."""
    try:
        tokens = tokenize(text)
    except LexError:
        return " ".join(text.split())
    return " ".join(t.text.upper() if t.kind == KEYWORD else t.text for t in tokens)


# -- AST ----------------------------------------------------------------------
# Offsets are carried for error reporting but excluded from equality so that
# a pretty-printed and re-parsed statement compares structurally equal.


@dataclass(frozen=True)
class RowsFrame:
    preceding: int  # W
    include_current: bool  # False: upper bound 1 PRECEDING (window excludes the anchor event)

    @property
    def kind(self) -> str:
        return "ROWS"

    def to_sql(self) -> str:
        end = "CURRENT ROW" if self.include_current else "1 PRECEDING"
        return f"ROWS BETWEEN {self.preceding} PRECEDING AND {end}"


@dataclass(frozen=True)
class RangeFrame:
    duration_ms: int

    @property
    def kind(self) -> str:
        return "RANGE"

    def to_sql(self) -> str:
        for unit, ms in (("h", 3_600_000), ("m", 60_000), ("s", 1_000)):
            if self.duration_ms % ms == 0:
                return f"RANGE BETWEEN {self.duration_ms // ms}{unit} PRECEDING AND CURRENT ROW"
        return f"RANGE BETWEEN {self.duration_ms}ms PRECEDING AND CURRENT ROW"


Frame = RowsFrame | RangeFrame


@dataclass(frozen=True)
class WindowDef:
    partition_by: str
    order_by: str
    frame: Frame
    offset: int = field(default=-1, compare=False)

    def to_sql(self) -> str:
        return f"(PARTITION BY {self.partition_by} ORDER BY {self.order_by} {self.frame.to_sql()})"


@dataclass(frozen=True)
class WindowSpec:
    """A fully-resolved window aggregate: which column, which aggregate,
    over whose events in what frame."""

    partition_column: str
    order_column: str
    frame: Frame
    aggregate: str
    column: str

    def describe(self) -> str:
        if isinstance(self.frame, RowsFrame):
            w = f"w={self.frame.preceding} ROWS"
            if self.frame.include_current:
                w += "+current"
        else:
            w = f"w={self.frame.duration_ms}ms RANGE"
        return w


@dataclass(frozen=True)
class WindowAggItem:
    func: str
    column: str
    window: str
    offset: int = field(default=-1, compare=False)

    def to_sql(self) -> str:
        return f"{self.func}({self.column}) OVER {self.window}"


@dataclass(frozen=True)
class CallItem:
    func: str
    args: tuple[str, ...]
    offset: int = field(default=-1, compare=False)

    def to_sql(self) -> str:
        return f"{self.func}({', '.join(self.args)})"


@dataclass(frozen=True)
class ColumnItem:
    name: str
    offset: int = field(default=-1, compare=False)

    def to_sql(self) -> str:
        return self.name


Item = WindowAggItem | CallItem | ColumnItem


@dataclass(frozen=True)
class Comparison:
    column: str
    op: str  # = < > <= >=
    value: int | float | str
    offset: int = field(default=-1, compare=False)

    def to_sql(self) -> str:
        if isinstance(self.value, str):
            lit = "'" + self.value.replace("'", "''") + "'"
        else:
            lit = repr(self.value)
        return f"{self.column} {self.op} {lit}"


@dataclass(frozen=True)
class SelectStmt:
    items: tuple[Item, ...]
    table: str
    where: Comparison | None
    windows: tuple[tuple[str, WindowDef], ...]

    kind = "select"

    def window(self, name: str) -> WindowDef:
        for n, d in self.windows:
            if n == name:
                return d
        raise KeyError(name)

    def to_sql(self) -> str:
        parts = ["SELECT ", ", ".join(i.to_sql() for i in self.items), " FROM ", self.table]
        if self.where is not None:
            parts += [" WHERE ", self.where.to_sql()]
        if self.windows:
            defs = ", ".join(f"{n} AS {d.to_sql()}" for n, d in self.windows)
            parts += [" WINDOW ", defs]
        return "".join(parts)


@dataclass(frozen=True)
class DeployStmt:
    name: str
    select: SelectStmt

    kind = "deploy"

    def to_sql(self) -> str:
        return f"DEPLOY {self.name} AS {self.select.to_sql()}"


Statement = SelectStmt | DeployStmt


# -- parser ---------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, tokens: list[Token]):
        self.text = text
        self.tokens = tokens
        self.pos = 0

    # helpers

    def _offset(self) -> int:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos].offset
        return len(self.text)

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def error(self, message: str, *expected: str) -> QuerySyntaxError:
        return QuerySyntaxError(message, offset=self._offset(), expected=tuple(sorted(expected)))

    def check_kw(self, *words: str) -> bool:
        t = self.peek()
        return t is not None and t.kind == KEYWORD and t.text.upper() in words

    def match_kw(self, *words: str) -> Token | None:
        if self.check_kw(*words):
            t = self.tokens[self.pos]
            self.pos += 1
            return t
        return None

    def expect_kw(self, word: str) -> Token:
        t = self.match_kw(word)
        if t is None:
            raise self.error(f"expected {word}", word)
        return t

    def check_symbol(self, sym: str) -> bool:
        t = self.peek()
        return t is not None and t.kind == SYMBOL and t.text == sym

    def match_symbol(self, sym: str) -> bool:
        if self.check_symbol(sym):
            self.pos += 1
            return True
        return False

    def expect_symbol(self, sym: str) -> None:
        if not self.match_symbol(sym):
            raise self.error(f"expected {sym!r}", sym)

    def expect_ident(self, what: str = "identifier") -> Token:
        t = self.peek()
        if t is None or t.kind != IDENT:
            raise self.error(f"expected {what}", what)
        self.pos += 1
        return t

    # grammar

    def statement(self) -> Statement:
        t = self.peek()
        if t is None:
            raise self.error("empty statement", "SELECT", "DEPLOY")
        if self.match_kw("DEPLOY"):
            name = self.expect_ident("deployment name").text
            self.expect_kw("AS")
            stmt: Statement = DeployStmt(name, self.select())
        elif self.check_kw("SELECT"):
            stmt = self.select()
        elif t.kind == KEYWORD and t.text.upper() in _UNSUPPORTED_STATEMENTS:
            raise UnsupportedFeatureError(f"{t.text.upper()} is not supported", offset=t.offset)
        else:
            raise self.error("expected a statement", "SELECT", "DEPLOY")
        self._expect_end()
        return stmt

    def _expect_end(self) -> None:
        t = self.peek()
        if t is None:
            return
        if t.kind == KEYWORD and t.text.upper() in _UNSUPPORTED_TRAILING:
            raise UnsupportedFeatureError(f"{t.text.upper()} is not supported", offset=t.offset)
        raise self.error(f"unexpected token {t.text!r}", "end of statement")

    def select(self) -> SelectStmt:
        self.expect_kw("SELECT")
        items = [self.item()]
        while self.match_symbol(","):
            items.append(self.item())
        self.expect_kw("FROM")
        table = self.expect_ident("table name").text
        t = self.peek()
        if t is not None and t.kind == KEYWORD and t.text.upper() in ("JOIN", "INNER", "LEFT", "RIGHT"):
            raise UnsupportedFeatureError("JOIN is not supported", offset=t.offset)
        where = None
        if self.match_kw("WHERE"):
            where = self.comparison()
        windows: list[tuple[str, WindowDef]] = []
        if self.match_kw("WINDOW"):
            windows.append(self.window_def())
            while self.match_symbol(","):
                windows.append(self.window_def())
        names = [n for n, _ in windows]
        if len(set(names)) != len(names):
            raise QuerySyntaxError("duplicate window name", offset=self._offset())
        for item in items:
            if isinstance(item, WindowAggItem) and item.window not in names:
                raise QuerySyntaxError(
                    f"window {item.window!r} is not defined", offset=item.offset
                )
        return SelectStmt(tuple(items), table, where, tuple(windows))

    def item(self) -> Item:
        t = self.peek()
        if t is None:
            raise self.error("expected a select item", "aggregate", "identifier")
        if t.kind == KEYWORD and t.text.upper() in AGG_FUNCS:
            self.pos += 1
            self.expect_symbol("(")
            column = self.expect_ident("column name").text
            self.expect_symbol(")")
            self.expect_kw("OVER")
            window = self.expect_ident("window name").text
            return WindowAggItem(t.text.upper(), column, window, offset=t.offset)
        if t.kind == IDENT:
            self.pos += 1
            if self.match_symbol("("):
                args = [self.expect_ident("argument").text]
                while self.match_symbol(","):
                    args.append(self.expect_ident("argument").text)
                self.expect_symbol(")")
                return CallItem(t.text, tuple(args), offset=t.offset)
            return ColumnItem(t.text, offset=t.offset)
        raise self.error(f"expected a select item, got {t.text!r}", "aggregate", "identifier")

    def comparison(self) -> Comparison:
        col = self.expect_ident("column name")
        t = self.peek()
        if t is None or t.kind != SYMBOL or t.text not in ("=", "<", ">", "<=", ">="):
            raise self.error("expected a comparison operator", "=", "<", ">", "<=", ">=")
        self.pos += 1
        lit = self.peek()
        if lit is None or lit.kind not in (NUMBER, STRING):
            raise self.error("expected a literal", "number", "string")
        self.pos += 1
        value: int | float | str
        if lit.kind == STRING:
            value = lit.text[1:-1].replace("''", "'")
        else:
            if any(c.isalpha() for c in lit.text):
                raise QuerySyntaxError("literal must be a plain number", offset=lit.offset)
            value = float(lit.text) if "." in lit.text else int(lit.text)
        return Comparison(col.text, t.text, value, offset=col.offset)

    def window_def(self) -> tuple[str, WindowDef]:
        name = self.expect_ident("window name")
        self.expect_kw("AS")
        self.expect_symbol("(")
        self.expect_kw("PARTITION")
        self.expect_kw("BY")
        partition = self.expect_ident("partition column").text
        self.expect_kw("ORDER")
        self.expect_kw("BY")
        order = self.expect_ident("order column").text
        frame = self.frame()
        self.expect_symbol(")")
        return name.text, WindowDef(partition, order, frame, offset=name.offset)

    def frame(self) -> Frame:
        if self.match_kw("ROWS"):
            self.expect_kw("BETWEEN")
            w = self._int_token("window size")
            self.expect_kw("PRECEDING")
            self.expect_kw("AND")
            if self.check_kw("CURRENT"):
                self.expect_kw("CURRENT")
                self.expect_kw("ROW")
                return RowsFrame(w, include_current=True)
            one = self._int_token("1")
            if one != 1:
                raise QuerySyntaxError(
                    "ROWS frame upper bound must be 1 PRECEDING or CURRENT ROW",
                    offset=self.tokens[self.pos - 1].offset,
                )
            self.expect_kw("PRECEDING")
            return RowsFrame(w, include_current=False)
        if self.match_kw("RANGE"):
            self.expect_kw("BETWEEN")
            duration = self._duration_token()
            self.expect_kw("PRECEDING")
            self.expect_kw("AND")
            self.expect_kw("CURRENT")
            self.expect_kw("ROW")
            return RangeFrame(duration)
        raise self.error("expected a frame", "ROWS", "RANGE")

    def _int_token(self, what: str) -> int:
        t = self.peek()
        if t is None or t.kind != NUMBER or not t.text.isdigit():
            raise self.error(f"expected an integer {what}", "integer")
        self.pos += 1
        value = int(t.text)
        if value < 1:
            raise QuerySyntaxError(f"{what} must be >= 1", offset=t.offset)
        return value

    def _duration_token(self) -> int:
        t = self.peek()
        if t is None or t.kind != NUMBER:
            raise self.error("expected a duration like 10s", "duration")
        m = re.fullmatch(r"(\d+)([A-Za-z]+)", t.text)
        if m is None or m.group(2).lower() not in _DURATION_UNITS_MS:
            raise QuerySyntaxError(
                f"bad duration {t.text!r} (use ms, s, m, or h)", offset=t.offset
            )
        self.pos += 1
        value = int(m.group(1)) * _DURATION_UNITS_MS[m.group(2).lower()]
        if value < 1:
            raise QuerySyntaxError("duration must be > 0", offset=t.offset)
        return value


def parse(text: str) -> tuple[Statement, int]:
    """Parse *text*, returning the statement and elapsed microseconds."""
    t0 = time.perf_counter_ns()
    stmt = _Parser(text, tokenize(text)).statement()
    return stmt, (time.perf_counter_ns() - t0) // 1000
