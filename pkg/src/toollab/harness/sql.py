"""Minimal in-memory SQL engine for execution-accuracy checking.

Supported subset: ``SELECT`` list (columns, ``*``, ``COUNT``/``AVG``/``SUM``
aggregates, ``AS`` aliases), ``FROM`` with table aliases, at most one
``JOIN ... ON`` equality, ``WHERE`` with comparisons joined by ``AND``, and
``GROUP BY``.  Everything else raises :class:`SqlUnsupported` (a format-level
failure); references to unknown tables or columns raise
:class:`SqlSemanticError` (the query parses but points at nothing).
Result sets are compared as multisets, so row order never matters.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Any, Optional, Sequence


class SqlError(Exception):
    pass


class SqlUnsupported(SqlError):
    """Query is outside the supported subset or fails to parse."""


class SqlSemanticError(SqlError):
    """Query parses but references an unknown table or column."""


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: tuple[tuple[Any, ...], ...]


Database = dict[str, Table]


def fixture_db() -> Database:
    """The bundled three-table HR database used by the SQL suite."""
    return {
        "employees": Table(
            columns=("id", "name", "department_id", "salary", "hire_date"),
            rows=(
                (1, "Alice", 1, 120000, "2019-03-01"),
                (2, "Bob", 1, 95000, "2020-07-15"),
                (3, "Carol", 2, 88000, "2018-01-20"),
                (4, "Dan", 2, 72000, "2021-11-02"),
                (5, "Erin", 3, 64000, "2022-05-09"),
                (6, "Frank", 1, 155000, "2017-06-30"),
                (7, "Grace", 3, 59000, "2023-02-14"),
                (8, "Heidi", 2, 101000, "2016-09-01"),
            ),
        ),
        "departments": Table(
            columns=("id", "name", "budget"),
            rows=(
                (1, "Engineering", 2500000),
                (2, "Sales", 1200000),
                (3, "Support", 600000),
            ),
        ),
        "projects": Table(
            columns=("id", "name", "department_id", "start_date", "end_date"),
            rows=(
                (1, "Apollo", 1, "2021-01-01", "2022-01-01"),
                (2, "Borealis", 1, "2022-03-01", "2023-06-01"),
                (3, "Cascade", 2, "2020-05-01", "2021-05-01"),
                (4, "Dune", 3, "2023-01-01", "2024-01-01"),
            ),
        ),
    }


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<str>'[^']*')|(?P<id>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><>|!=|<=|>=|[=<>*(),.;]))"
)

_KEYWORDS = {"select", "from", "join", "on", "where", "and", "group", "by", "as", "inner"}
_AGGREGATES = {"count", "avg", "sum"}


def _lex(text: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    text = text.strip().rstrip(";")
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise SqlUnsupported(f"cannot lex at offset {pos}: {text[pos:pos+12]!r}")
        pos = m.end()
        if m.group("num") is not None:
            tokens.append(("num", m.group("num")))
        elif m.group("str") is not None:
            tokens.append(("str", m.group("str")[1:-1]))
        elif m.group("id") is not None:
            word = m.group("id")
            kind = "kw" if word.lower() in _KEYWORDS | _AGGREGATES else "id"
            tokens.append((kind, word.lower() if kind == "kw" else word))
        else:
            tokens.append(("op", m.group("op")))
    return tokens


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class ColumnRef:
    table: Optional[str]  # alias or table name
    column: str  # "*" for star


@dataclass(frozen=True)
class SelectItem:
    expr: "ColumnRef | Aggregate"
    alias: Optional[str]


@dataclass(frozen=True)
class Aggregate:
    func: str  # count | avg | sum
    arg: ColumnRef  # count may take star


@dataclass(frozen=True)
class Comparison:
    left: ColumnRef
    op: str
    right: Any  # literal


@dataclass(frozen=True)
class SelectQuery:
    items: tuple[SelectItem, ...]
    table: str
    table_alias: Optional[str]
    join_table: Optional[str]
    join_alias: Optional[str]
    join_on: Optional[tuple[ColumnRef, ColumnRef]]
    where: tuple[Comparison, ...]
    group_by: tuple[ColumnRef, ...]


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[tuple[str, str]]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, kind: Optional[str] = None, value: Optional[str] = None) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise SqlUnsupported("unexpected end of query")
        if kind is not None and tok[0] != kind:
            raise SqlUnsupported(f"expected {kind}, got {tok}")
        if value is not None and tok[1] != value:
            raise SqlUnsupported(f"expected {value!r}, got {tok}")
        self.pos += 1
        return tok

    def accept(self, kind: str, value: Optional[str] = None) -> bool:
        tok = self.peek()
        if tok is not None and tok[0] == kind and (value is None or tok[1] == value):
            self.pos += 1
            return True
        return False

    def parse(self) -> SelectQuery:
        self.take("kw", "select")
        items = [self.select_item()]
        while self.accept("op", ","):
            items.append(self.select_item())
        self.take("kw", "from")
        table, table_alias = self.table_ref()
        join_table = join_alias = None
        join_on = None
        if self.accept("kw", "inner"):
            self.take("kw", "join")
            join_table, join_alias, join_on = self.join_clause()
        elif self.accept("kw", "join"):
            join_table, join_alias, join_on = self.join_clause()
        where: list[Comparison] = []
        if self.accept("kw", "where"):
            where.append(self.comparison())
            while self.accept("kw", "and"):
                where.append(self.comparison())
        group_by: list[ColumnRef] = []
        if self.accept("kw", "group"):
            self.take("kw", "by")
            group_by.append(self.column_ref())
            while self.accept("op", ","):
                group_by.append(self.column_ref())
        if self.peek() is not None:
            raise SqlUnsupported(f"trailing tokens: {self.tokens[self.pos:]}")
        return SelectQuery(
            items=tuple(items), table=table, table_alias=table_alias,
            join_table=join_table, join_alias=join_alias, join_on=join_on,
            where=tuple(where), group_by=tuple(group_by),
        )

    def join_clause(self):
        join_table, join_alias = self.table_ref()
        self.take("kw", "on")
        left = self.column_ref()
        self.take("op", "=")
        right = self.column_ref()
        return join_table, join_alias, (left, right)

    def table_ref(self) -> tuple[str, Optional[str]]:
        name = self.take("id")[1]
        alias = None
        if self.accept("kw", "as"):
            alias = self.take("id")[1]
        elif self.peek() is not None and self.peek()[0] == "id":
            alias = self.take("id")[1]
        return name, alias

    def select_item(self) -> SelectItem:
        tok = self.peek()
        if tok is None:
            raise SqlUnsupported("bare select")
        if tok == ("op", "*"):
            self.take()
            return SelectItem(ColumnRef(None, "*"), None)
        if tok[0] == "kw" and tok[1] in _AGGREGATES:
            func = self.take()[1]
            self.take("op", "(")
            if self.peek() == ("op", "*"):
                self.take()
                arg = ColumnRef(None, "*")
                if func != "count":
                    raise SqlUnsupported(f"{func}(*) unsupported")
            else:
                arg = self.column_ref()
            self.take("op", ")")
            expr: ColumnRef | Aggregate = Aggregate(func, arg)
        else:
            expr = self.column_ref(allow_star=True)
        alias = None
        if self.accept("kw", "as"):
            alias = self.take("id")[1]
        return SelectItem(expr, alias)

    def column_ref(self, allow_star: bool = False) -> ColumnRef:
        first = self.take("id")[1]
        if self.accept("op", "."):
            if allow_star and self.accept("op", "*"):
                return ColumnRef(first, "*")
            return ColumnRef(first, self.take("id")[1])
        return ColumnRef(None, first)

    def comparison(self) -> Comparison:
        left = self.column_ref()
        op = self.take("op")[1]
        if op not in ("=", "!=", "<>", "<", "<=", ">", ">="):
            raise SqlUnsupported(f"unsupported comparison operator {op!r}")
        tok = self.take()
        if tok[0] == "num":
            right: Any = float(tok[1]) if "." in tok[1] else int(tok[1])
        elif tok[0] == "str":
            right = tok[1]
        else:
            raise SqlUnsupported("comparisons must be against literals")
        return Comparison(left, "!=" if op == "<>" else op, right)


def parse_sql(text: str) -> SelectQuery:
    return _Parser(_lex(text)).parse()


# ---------------------------------------------------------------------------
# Evaluator


class _Scope:
    """Column resolution over the (optionally joined) row environment."""

    def __init__(self, query: SelectQuery, db: Database):
        self.sources: list[tuple[str, str, Table]] = []  # (effective name, table name, table)
        for name, alias in ((query.table, query.table_alias), (query.join_table, query.join_alias)):
            if name is None:
                continue
            table = db.get(name)
            if table is None:
                raise SqlSemanticError(f"unknown table {name!r}")
            self.sources.append((alias or name, name, table))

    def resolve(self, ref: ColumnRef) -> tuple[int, int]:
        """(source index, column index) for a reference."""
        candidates = []
        for src_idx, (eff, _name, table) in enumerate(self.sources):
            if ref.table is not None and ref.table != eff:
                continue
            if ref.column in table.columns:
                candidates.append((src_idx, table.columns.index(ref.column)))
        if not candidates:
            raise SqlSemanticError(f"unknown column {ref.table or ''}.{ref.column}".strip("."))
        if len(candidates) > 1:
            raise SqlSemanticError(f"ambiguous column {ref.column!r}")
        return candidates[0]

    def star_columns(self, ref: ColumnRef) -> list[tuple[int, int]]:
        out = []
        for src_idx, (eff, _name, table) in enumerate(self.sources):
            if ref.table is not None and ref.table != eff:
                continue
            out.extend((src_idx, col_idx) for col_idx in range(len(table.columns)))
        if not out:
            raise SqlSemanticError(f"unknown table alias {ref.table!r}")
        return out


def _compare(left: Any, op: str, right: Any) -> bool:
    try:
        if op == "=":
            return left == right
        if op == "!=":
            return left != right
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        if op == ">=":
            return left >= right
    except TypeError:
        return False
    raise SqlUnsupported(f"operator {op!r}")


def execute_sql(text: str, db: Database) -> list[tuple[Any, ...]]:
    """Run a query of the supported subset; deterministic row multiset."""
    query = parse_sql(text)
    scope = _Scope(query, db)

    rows: list[tuple[tuple[Any, ...], ...]]
    base = scope.sources[0][2]
    if query.join_table is not None:
        joined = scope.sources[1][2]
        left_ref, right_ref = query.join_on  # type: ignore[misc]
        li = scope.resolve(left_ref)
        ri = scope.resolve(right_ref)
        rows = []
        for a in base.rows:
            for b in joined.rows:
                env = (a, b)
                if env[li[0]][li[1]] == env[ri[0]][ri[1]]:
                    rows.append(env)
    else:
        rows = [(a,) for a in base.rows]

    def passes(env) -> bool:
        for cond in query.where:
            src, col = scope.resolve(cond.left)
            if not _compare(env[src][col], cond.op, cond.right):
                return False
        return True

    rows = [env for env in rows if passes(env)]

    has_aggregate = any(isinstance(item.expr, Aggregate) for item in query.items)
    # Resolve plain column items up front so unknown references always raise.
    resolved: list[tuple[SelectItem, Any]] = []
    for item in query.items:
        if isinstance(item.expr, Aggregate):
            arg = item.expr.arg
            loc = None if arg.column == "*" else scope.resolve(arg)
            resolved.append((item, loc))
        elif item.expr.column == "*":
            resolved.append((item, scope.star_columns(item.expr)))
        else:
            resolved.append((item, scope.resolve(item.expr)))

    if not has_aggregate and not query.group_by:
        out = []
        for env in rows:
            record: list[Any] = []
            for item, loc in resolved:
                if isinstance(item.expr, ColumnRef) and item.expr.column == "*":
                    record.extend(env[s][c] for s, c in loc)
                else:
                    record.append(env[loc[0]][loc[1]])
            out.append(tuple(record))
        return out

    group_locs = [scope.resolve(ref) for ref in query.group_by]
    groups: dict[tuple, list] = {}
    for env in rows:
        key = tuple(env[s][c] for s, c in group_locs)
        groups.setdefault(key, []).append(env)
    if not query.group_by:
        groups = {(): rows}

    out = []
    for key, members in groups.items():
        record = []
        for item, loc in resolved:
            if isinstance(item.expr, Aggregate):
                if item.expr.func == "count":
                    if loc is None:
                        record.append(len(members))
                    else:
                        record.append(sum(1 for env in members if env[loc[0]][loc[1]] is not None))
                else:
                    values = [env[loc[0]][loc[1]] for env in members]
                    if not all(isinstance(v, (int, float)) for v in values):
                        raise SqlSemanticError(f"{item.expr.func} over non-numeric column")
                    total = sum(values)
                    record.append(total if item.expr.func == "sum" else (total / len(values) if values else None))
            else:
                if isinstance(item.expr, ColumnRef) and item.expr.column == "*":
                    raise SqlUnsupported("* in an aggregated select list")
                if loc not in group_locs:
                    raise SqlSemanticError(
                        f"column {item.expr.column!r} is neither aggregated nor grouped"
                    )
                record.append(key[group_locs.index(loc)])
        out.append(tuple(record))
    return out


def _normalize(value: Any) -> Any:
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, float):
        return round(value, 6)
    return value


def result_sets_equal(a: Sequence[tuple], b: Sequence[tuple]) -> bool:
    """Order-insensitive multiset equality with numeric normalization."""
    norm_a = Counter(tuple(_normalize(v) for v in row) for row in a)
    norm_b = Counter(tuple(_normalize(v) for v in row) for row in b)
    return norm_a == norm_b
