"""Evaluation harness: task suites, graders, the SQL engine, and the grid."""

from .checkers import categorize, check_success
from .grid import (
    CellResult,
    GridCell,
    GridReport,
    cell_examples,
    cell_prompt,
    default_grid,
    emit_report,
    run_grid,
)
from .records import (
    Category,
    FAMILIES,
    Outcome,
    SuiteParseError,
    TaskRecord,
    bundled_suite,
    bundled_suite_path,
    load_bundled_schema,
    load_suite,
)
from .sql import (
    Database,
    SqlError,
    SqlSemanticError,
    SqlUnsupported,
    execute_sql,
    fixture_db,
    parse_sql,
    result_sets_equal,
)

__all__ = [
    "Category",
    "CellResult",
    "Database",
    "FAMILIES",
    "GridCell",
    "GridReport",
    "Outcome",
    "SqlError",
    "SqlSemanticError",
    "SqlUnsupported",
    "SuiteParseError",
    "TaskRecord",
    "bundled_suite",
    "bundled_suite_path",
    "categorize",
    "cell_examples",
    "cell_prompt",
    "check_success",
    "default_grid",
    "emit_report",
    "execute_sql",
    "fixture_db",
    "load_bundled_schema",
    "load_suite",
    "parse_sql",
    "result_sets_equal",
    "run_grid",
]
