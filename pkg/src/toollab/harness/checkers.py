"""Per-family success checking and error categorization.

Categorization is a strict precedence: an output with no non-whitespace
content is ``EMPTY``; otherwise, if the family's parser rejects it, it is
``FORMAT``; otherwise the family's semantic comparison decides between
success (``NONE``) and ``SEMANTIC``.

Semantic comparisons are deliberately more forgiving than the surface form:
API calls match on the parsed (name, positional args, keyword-argument set),
so keyword order never matters; SQL matches on execution results over the
bundled fixture database; bash matches after whitespace normalization against
the gold command or any listed alternative; navigation actions match exactly.
"""

from __future__ import annotations

import re

from ..prompts import UnknownFamily, _NAV_RE, is_well_formed, parse_api_call
from .records import Category, FAMILIES
from .sql import Database, SqlSemanticError, SqlUnsupported, execute_sql, fixture_db, result_sets_equal


def _api_signature(text: str) -> tuple:
    name, positional, keyword = parse_api_call(text)
    return name, positional, frozenset(keyword.items())


def _check_api(raw: str, gold: dict) -> Category:
    try:
        got = _api_signature(raw)
    except ValueError:
        return Category.FORMAT
    for candidate in [gold["call"], *gold.get("alternatives", [])]:
        if got == _api_signature(candidate):
            return Category.NONE
    return Category.SEMANTIC


def _check_sql(raw: str, gold: dict, db: Database) -> Category:
    expected = execute_sql(gold["sql"], db)
    try:
        actual = execute_sql(raw, db)
    except SqlUnsupported:
        return Category.FORMAT
    except SqlSemanticError:
        return Category.SEMANTIC
    return Category.NONE if result_sets_equal(actual, expected) else Category.SEMANTIC


def _check_nav(raw: str, gold: dict) -> Category:
    if _NAV_RE.match(raw) is None:
        return Category.FORMAT
    if raw in [gold["action"], *gold.get("alternatives", [])]:
        return Category.NONE
    return Category.SEMANTIC


_WS_RE = re.compile(r"\s+")


def _normalize_bash(text: str) -> str:
    return _WS_RE.sub(" ", text.strip())


def _check_bash(raw: str, gold: dict) -> Category:
    if not is_well_formed("bash", raw):
        return Category.FORMAT
    wanted = {_normalize_bash(c) for c in [gold["command"], *gold.get("alternatives", [])]}
    return Category.NONE if _normalize_bash(raw) in wanted else Category.SEMANTIC


def categorize(family: str, raw_output: str, gold: dict, db: Database | None = None) -> Category:
    """Error category for a raw model output (``NONE`` means success)."""
    if family not in FAMILIES:
        raise UnknownFamily(family)
    stripped = raw_output.strip()
    if not stripped:
        return Category.EMPTY
    if family == "api":
        return _check_api(stripped, gold)
    if family == "sql":
        return _check_sql(stripped, gold, db if db is not None else fixture_db())
    if family == "nav":
        return _check_nav(stripped, gold)
    return _check_bash(stripped, gold)


def check_success(family: str, raw_output: str, gold: dict, db: Database | None = None) -> bool:
    return categorize(family, raw_output, gold, db) is Category.NONE
