"""Task records, outcomes, and suite loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

FAMILIES = ("api", "sql", "nav", "bash")


class SuiteParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class Category(Enum):
    NONE = "none"          # success
    SEMANTIC = "semantic"  # parseable but wrong
    FORMAT = "format"      # family parser rejects the output
    EMPTY = "empty"        # no non-whitespace output


@dataclass(frozen=True)
class TaskRecord:
    id: str
    family: str
    query: str
    gold: dict
    schema_ref: Optional[str] = None


@dataclass(frozen=True)
class Outcome:
    task_id: str
    raw_output: str
    success: bool
    category: Category
    latency_ms: float
    pass_at_1: bool

    def __post_init__(self) -> None:
        if self.success and self.category is not Category.NONE:
            raise ValueError("successful outcomes carry no error category")
        if not self.success and self.category is Category.NONE:
            raise ValueError("failed outcomes need an error category")


def load_suite(path: str | Path) -> list[TaskRecord]:
    """Read a JSONL task suite; duplicate ids and unknown families are rejected."""
    path = Path(path)
    records: list[TaskRecord] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SuiteParseError(f"bad JSON: {exc}", lineno) from None
            for key in ("id", "family", "query", "gold"):
                if key not in data:
                    raise SuiteParseError(f"missing field {key!r}", lineno)
            if data["family"] not in FAMILIES:
                raise SuiteParseError(f"unknown family {data['family']!r}", lineno)
            if data["id"] in seen:
                raise SuiteParseError(f"duplicate id {data['id']!r}", lineno)
            seen.add(data["id"])
            records.append(
                TaskRecord(
                    id=data["id"],
                    family=data["family"],
                    query=data["query"],
                    gold=data["gold"],
                    schema_ref=data.get("schema_ref"),
                )
            )
    return records


_DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def bundled_suite_path(family: str) -> Path:
    return _DATA_DIR / "suites" / f"{family}.jsonl"


def bundled_suite(family: str) -> list[TaskRecord]:
    return load_suite(bundled_suite_path(family))


def bundled_schema_path(schema_id: str) -> Path:
    return _DATA_DIR / "schemas" / f"{schema_id}.json"


def load_bundled_schema(schema_id: str):
    from ..schema import ToolSchema

    return ToolSchema.from_json_dict(json.loads(bundled_schema_path(schema_id).read_text()))
