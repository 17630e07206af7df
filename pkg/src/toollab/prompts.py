"""Byte-exact prompt assembly, shot control, docs toggle, and noise injection.

Prompts follow the Llama-3.2-Instruct chat-template marker sequence.  The
system block carries the family's documentation (toggleable), a fixed
instruction line, and the ``Examples:`` few-shot block truncated to the
requested shot count; the user block carries the query plus the family's
closing instruction ("Output ONLY the exact <noun> needed, nothing else.").
Markers are treated as opaque byte strings so byte-level backends consume
them unchanged.

Noise injection replaces a seeded-random subset of rendered examples with
structurally broken variants; every corrupted example is guaranteed to fail
the family's strict format check (:func:`is_well_formed`).
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

DEFAULT_CONTEXT_BUDGET = 4096  # bytes == byte-level tokens

FAMILIES = ("api", "sql", "nav", "bash")


class ContextOverflow(ValueError):
    """Rendered prompt exceeds the context budget."""


class UnknownFamily(KeyError):
    pass


@dataclass(frozen=True)
class FamilyTemplate:
    doc_body: str          # the {DOCUMENTATION} block
    doc_instruction: str   # terse format instruction, always present
    output_noun: str       # fills "Output ONLY the exact <noun> needed"


TEMPLATES: dict[str, FamilyTemplate] = {
    "api": FamilyTemplate(
        doc_body=(
            "# Model Loading API\n"
            "\n"
            "Generate Python code to load the appropriate pre-trained model.\n"
            "\n"
            "FORMATS (use exactly as shown):\n"
            "1. torchvision.models.MODEL_NAME(pretrained=True)\n"
            "2. torchvision.models.detection.MODEL_NAME(pretrained=True)\n"
            "3. pipeline('TASK', model='MODEL_NAME')"
        ),
        doc_instruction="Output ONLY the code. No imports, no explanations.",
        output_noun="code",
    ),
    "sql": FamilyTemplate(
        doc_body=(
            "# Enterprise SQL Query Generator\n"
            "\n"
            "Generate SQL queries for the given database schema.\n"
            "\n"
            "Schema:\n"
            "- employees(id, name, department_id, salary, hire_date)\n"
            "- departments(id, name, budget)\n"
            "- projects(id, name, department_id, start_date, end_date)"
        ),
        doc_instruction="Output ONLY the SQL query. No explanations.",
        output_noun="SQL query",
    ),
    "nav": FamilyTemplate(
        doc_body=(
            "# Web Navigation Agent\n"
            "\n"
            "Generate browser actions for web navigation tasks.\n"
            "\n"
            "Available Actions:\n"
            "- click[element_id]: Click on an element\n"
            "- type[element_id][text]: Type text into a field\n"
            "- scroll[direction]: Scroll up/down\n"
            "- goto[url]: Navigate to URL"
        ),
        doc_instruction="Output ONLY the action command.",
        output_noun="action",
    ),
    "bash": FamilyTemplate(
        doc_body=(
            "# Bash Command Generator\n"
            "\n"
            "Generate bash commands for system tasks."
        ),
        doc_instruction="Output ONLY the command. No explanations.",
        output_noun="command",
    ),
}

#: Curated few-shot pools, five per family; the first entries follow the
#: documented exemplar prompts.
DEFAULT_EXAMPLES: dict[str, tuple[tuple[str, str], ...]] = {
    "api": (
        ("Load a pre-trained ResNet50 model for image classification",
         "torchvision.models.resnet50(pretrained=True)"),
        ("I need DenseNet for image classification",
         "torchvision.models.densenet161(pretrained=True)"),
        ("Create a sentiment analysis pipeline",
         "pipeline('sentiment-analysis', model='distilbert-base-uncased-finetuned-sst-2-english')"),
        ("Load a Faster R-CNN model for object detection",
         "torchvision.models.detection.fasterrcnn_resnet50_fpn(pretrained=True)"),
        ("Create a text generation pipeline with GPT-2",
         "pipeline('text-generation', model='gpt2')"),
    ),
    "sql": (
        ("List all employees in the Engineering department",
         "SELECT e.* FROM employees e JOIN departments d ON e.department_id = d.id WHERE d.name = 'Engineering'"),
        ("Find the average salary by department",
         "SELECT d.name, AVG(e.salary) AS avg_salary FROM employees e JOIN departments d ON e.department_id = d.id GROUP BY d.name"),
        ("Show the names of all departments",
         "SELECT name FROM departments"),
        ("Count the employees in each department",
         "SELECT d.name, COUNT(e.id) AS n FROM employees e JOIN departments d ON e.department_id = d.id GROUP BY d.name"),
        ("List employees earning more than 100000",
         "SELECT name FROM employees WHERE salary > 100000"),
    ),
    "nav": (
        ("Click the login button", "click[login-btn]"),
        ("Enter \"john@email.com\" in the email field", "type[email-input][john@email.com]"),
        ("Scroll down the page", "scroll[down]"),
        ("Go to the checkout page", "goto[https://shop.example.com/checkout]"),
        ("Click the first search result", "click[result-0]"),
    ),
    "bash": (
        ("List all Python files in the current directory", "find . -name \"*.py\" -type f"),
        ("Count lines in all text files", "wc -l *.txt"),
        ("Find files modified in the last 24 hours", "find . -mtime -1 -type f"),
        ("Show disk usage of the current directory", "du -sh ."),
        ("Print the last 20 lines of the system log", "tail -n 20 /var/log/syslog"),
    ),
}


@dataclass(frozen=True)
class PromptSpec:
    family: str
    query: str
    examples: tuple[tuple[str, str], ...] = ()
    shots: int = 0
    use_docs: bool = True
    docs: Optional[str] = None  # override the family documentation block
    context_budget: int = DEFAULT_CONTEXT_BUDGET

    def __post_init__(self) -> None:
        if self.family not in TEMPLATES:
            raise UnknownFamily(self.family)
        if not 0 <= self.shots <= len(self.examples) and self.shots != 0:
            raise ValueError(f"shots={self.shots} exceeds {len(self.examples)} examples")


def build(spec: PromptSpec) -> str:
    """Render the full prompt; byte-identical for identical specs."""
    template = TEMPLATES[spec.family]
    parts: list[str] = []
    if spec.use_docs:
        parts.append(spec.docs if spec.docs is not None else template.doc_body)
    parts.append(template.doc_instruction)
    if spec.shots > 0:
        rendered = "\n\n".join(
            f"Query: {q}\nOutput: {o}" for q, o in spec.examples[: spec.shots]
        )
        parts.append(f"Examples:\n{rendered}")
    system_text = "\n\n".join(parts)
    prompt = (
        "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\n"
        f"{system_text}\n"
        "<|eot_id|><|start_header_id|>user<|end_header_id|>\n\n"
        f"{spec.query}\n\n"
        f"Output ONLY the exact {template.output_noun} needed, nothing else.\n"
        "<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n"
    )
    if len(prompt.encode()) > spec.context_budget:
        raise ContextOverflow(
            f"prompt is {len(prompt.encode())} bytes, budget {spec.context_budget}"
        )
    return prompt


# ---------------------------------------------------------------------------
# Strict per-family format checks (used by the noise contract)

_NAV_RE = re.compile(
    r"^(click\[[^\[\]]+\]|type\[[^\[\]]+\]\[[^\[\]]+\]|scroll\[(up|down)\]|goto\[[^\[\]]+\])$"
)
_API_CALL_RE = re.compile(r"^([A-Za-z_][\w.]*)\((.*)\)$", re.DOTALL)


def _split_top_level(body: str) -> list[str]:
    parts, buf, depth, quote = [], [], 0, None
    for ch in body:
        if quote:
            buf.append(ch)
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
            buf.append(ch)
        elif ch == "(":
            depth += 1
            buf.append(ch)
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ValueError("unbalanced parenthesis")
            buf.append(ch)
        elif ch == "," and depth == 0:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if quote or depth:
        raise ValueError("unterminated quote or parenthesis")
    parts.append("".join(buf))
    return parts


def parse_api_call(text: str) -> tuple[str, tuple[str, ...], dict[str, str]]:
    """Parse ``name(pos, ..., key=value, ...)``; values stay raw text.

    Accepts dotted names and positional arguments (the API family's surface
    form), with keyword arguments in any order.
    """
    m = _API_CALL_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a call: {text!r}")
    name, body = m.group(1), m.group(2)
    positional: list[str] = []
    keyword: dict[str, str] = {}
    if body.strip():
        for part in _split_top_level(body):
            part = part.strip()
            if not part:
                raise ValueError("empty argument")
            key_match = re.match(r"^([A-Za-z_]\w*)=(?![=])(.*)$", part, re.DOTALL)
            if key_match:
                key = key_match.group(1)
                if key in keyword:
                    raise ValueError(f"duplicate keyword {key!r}")
                keyword[key] = key_match.group(2).strip()
            else:
                if keyword:
                    raise ValueError("positional argument after keyword argument")
                positional.append(part)
    return name, tuple(positional), keyword


def _quotes_balanced(text: str) -> bool:
    for q in ("'", '"'):
        if text.count(q) % 2:
            return False
    return True


def is_well_formed(family: str, text: str) -> bool:
    """Strict format check: parseable AND in canonical surface form.

    Stricter than the success checkers (which tolerate argument reordering):
    keyword arguments must appear in sorted order, delimiters balanced.
    Corruption operators target exactly this predicate.
    """
    text = text.strip()
    if not text:
        return False
    if family == "api":
        try:
            _, _, keyword = parse_api_call(text)
        except ValueError:
            return False
        return list(keyword) == sorted(keyword)
    if family == "sql":
        from .harness.sql import SqlError, parse_sql

        try:
            parse_sql(text)
        except SqlError:
            return False
        return True
    if family == "nav":
        return _NAV_RE.match(text) is not None
    if family == "bash":
        if "\n" in text or not _quotes_balanced(text):
            return False
        if text.count("(") != text.count(")") or text.count("[") != text.count("]"):
            return False
        return bool(re.match(r"^[\w./-]", text))
    raise UnknownFamily(family)


# ---------------------------------------------------------------------------
# Noise injection


class NoiseMode:
    PARAM_REORDER = "param_reorder"
    MALFORMED_SYNTAX = "malformed_syntax"


@dataclass(frozen=True)
class NoiseSpec:
    n_corrupt: int = 0  # 0..2 of the rendered shots
    modes: tuple[str, ...] = (NoiseMode.PARAM_REORDER, NoiseMode.MALFORMED_SYNTAX)

    def __post_init__(self) -> None:
        if not 0 <= self.n_corrupt <= 2:
            raise ValueError("n_corrupt must be 0, 1 or 2")
        if self.n_corrupt and not self.modes:
            raise ValueError("no corruption modes enabled")


_DELIMITERS = "()[]'\""


def _reorder_params(text: str) -> Optional[str]:
    """Swap the first two keyword arguments in the rendered call text."""
    try:
        name, positional, keyword = parse_api_call(text)
    except ValueError:
        return None
    if len(keyword) < 2:
        return None
    items = list(keyword.items())
    items[0], items[1] = items[1], items[0]
    args = list(positional) + [f"{k}={v}" for k, v in items]
    return f"{name}({', '.join(args)})"


def _break_syntax(text: str, rng: random.Random) -> str:
    """Delete one structural delimiter (or duplicate one when none deletes cleanly)."""
    positions = [i for i, ch in enumerate(text) if ch in _DELIMITERS]
    if positions:
        i = positions[rng.randrange(len(positions))]
        return text[:i] + text[i + 1:]
    return text + '"'


def corrupt(family: str, example: tuple[str, str], mode: str, rng: random.Random) -> tuple[str, str]:
    """Replace the example's output with a structurally broken variant.

    Param reordering only applies where it actually violates the canonical
    form (calls with >= 2 keyword arguments); otherwise the operator falls
    back to syntax breakage.  The result is verified to fail
    :func:`is_well_formed` before being returned.
    """
    query, output = example
    if mode == NoiseMode.PARAM_REORDER:
        reordered = _reorder_params(output)
        if reordered is not None and not is_well_formed(family, reordered):
            return query, reordered
        mode = NoiseMode.MALFORMED_SYNTAX
    if mode != NoiseMode.MALFORMED_SYNTAX:
        raise ValueError(f"unknown noise mode: {mode}")
    for _ in range(32):
        broken = _break_syntax(output, rng)
        if not is_well_formed(family, broken):
            return query, broken
    # Guaranteed failure: a lone quote is never balanced.
    return query, output + '"'


def apply_noise(
    family: str,
    examples: Sequence[tuple[str, str]],
    noise: NoiseSpec,
    rng: random.Random,
) -> tuple[tuple[str, str], ...]:
    """Corrupt ``noise.n_corrupt`` seeded-random positions among the examples."""
    if noise.n_corrupt > len(examples):
        raise ValueError("more corruptions requested than rendered examples")
    out = list(examples)
    positions = sorted(rng.sample(range(len(examples)), noise.n_corrupt))
    for pos in positions:
        mode = noise.modes[rng.randrange(len(noise.modes))]
        out[pos] = corrupt(family, out[pos], mode, rng)
    return tuple(out)
