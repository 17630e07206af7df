"""Tool schemas, call validation, and schema-perturbation episode generation.

A :class:`ToolSchema` describes one callable tool: its parameter names, kinds,
enum members, numeric ranges, and which parameters are required.  Schemas are
the root object of the whole stack -- they drive call validation, regex
compilation (see :mod:`toollab.fsm`), and the synthetic-episode generator used
to train the value function.

Calls are serialized in a single canonical text form::

    tool_name(k1=v1, k2=v2)

with keys sorted lexicographically.  Strings are single-quoted, enum members
and booleans are bare, numerics are plain decimal.  The canonical form
round-trips through :func:`parse_call`.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence, Union


class SchemaError(ValueError):
    """A schema violates its own structural invariants."""


class CallParseError(ValueError):
    """Text is not a well-formed canonical tool call."""


class NoPerturbationPossible(ValueError):
    """The requested perturbation operator has nothing to act on."""


class EmptySupport(ValueError):
    """An operation requiring support trajectories received none."""


class Symbol(str):
    """A bare identifier value (enum member).  Renders unquoted.

    Subclasses ``str`` so equality and hashing against plain strings work;
    only canonical rendering distinguishes the two.
    """

    __slots__ = ()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Symbol({str.__repr__(self)})"


#: Values a call argument may take.
Literal = Union[str, int, float, bool]

_IDENT_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-")


def _is_identifier(text: str) -> bool:
    return bool(text) and all(c in _IDENT_OK for c in text) and text[0] not in "0123456789-."


class ParamKind(Enum):
    STRING = "string"
    INTEGER = "integer"
    NUMBER = "number"
    BOOLEAN = "boolean"
    ENUM = "enum"


@dataclass(frozen=True)
class ParamSpec:
    """One parameter of a tool: its kind, optionality, and constraints."""

    name: str
    kind: ParamKind
    required: bool = True
    enum_values: tuple[str, ...] = ()
    range: Optional[tuple[float, float]] = None
    default: Optional[Literal] = None

    def __post_init__(self) -> None:
        if not _is_identifier(self.name):
            raise SchemaError(f"bad parameter name: {self.name!r}")
        if self.kind is ParamKind.ENUM and not self.enum_values:
            raise SchemaError(f"enum parameter {self.name!r} has no values")
        if self.kind is not ParamKind.ENUM and self.enum_values:
            raise SchemaError(f"{self.name!r}: enum values on non-enum kind")
        if self.range is not None:
            if self.kind not in (ParamKind.INTEGER, ParamKind.NUMBER):
                raise SchemaError(f"{self.name!r}: range on non-numeric kind")
            lo, hi = self.range
            if lo > hi:
                raise SchemaError(f"{self.name!r}: range min {lo} > max {hi}")
        if self.required and self.default is not None:
            raise SchemaError(f"{self.name!r}: required parameter has a default")


@dataclass(frozen=True)
class ToolSchema:
    """A tool's callable surface plus its free-text documentation."""

    tool_name: str
    params: tuple[ParamSpec, ...]
    doc_text: str = ""

    def __post_init__(self) -> None:
        if not _is_identifier(self.tool_name):
            raise SchemaError(f"bad tool name: {self.tool_name!r}")
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise SchemaError(f"duplicate parameter names in {self.tool_name}")
        object.__setattr__(self, "params", tuple(self.params))

    def param(self, name: str) -> Optional[ParamSpec]:
        for p in self.params:
            if p.name == name:
                return p
        return None

    @property
    def required_params(self) -> tuple[ParamSpec, ...]:
        return tuple(p for p in self.params if p.required)

    @property
    def optional_params(self) -> tuple[ParamSpec, ...]:
        return tuple(p for p in self.params if not p.required)

    def to_json_dict(self) -> dict:
        out: dict = {"tool_name": self.tool_name, "doc_text": self.doc_text, "params": []}
        for p in self.params:
            d: dict = {"name": p.name, "kind": p.kind.value, "required": p.required}
            if p.enum_values:
                d["enum"] = list(p.enum_values)
            if p.range is not None:
                d["range"] = list(p.range)
            if p.default is not None:
                d["default"] = p.default
            out["params"].append(d)
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "ToolSchema":
        params = []
        for d in data.get("params", []):
            params.append(
                ParamSpec(
                    name=d["name"],
                    kind=ParamKind(d["kind"]),
                    required=d.get("required", True),
                    enum_values=tuple(d.get("enum", ())),
                    range=tuple(d["range"]) if "range" in d else None,
                    default=d.get("default"),
                )
            )
        return cls(
            tool_name=data["tool_name"],
            params=tuple(params),
            doc_text=data.get("doc_text", ""),
        )


# ---------------------------------------------------------------------------
# Canonical serialization and parsing


def render_value(value: Literal) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Symbol):
        return str(value)
    if isinstance(value, str):
        if "'" in value or "\\" in value:
            raise CallParseError(f"string value not representable: {value!r}")
        return f"'{value}'"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    raise CallParseError(f"unsupported value type: {type(value).__name__}")


@dataclass(frozen=True)
class ToolCall:
    """A concrete invocation: tool name plus argument map."""

    tool_name: str
    args: dict[str, Literal] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "args", dict(self.args))

    def render(self) -> str:
        """Canonical text form with keys sorted lexicographically."""
        inner = ", ".join(f"{k}={render_value(v)}" for k, v in sorted(self.args.items()))
        return f"{self.tool_name}({inner})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToolCall):
            return NotImplemented
        return self.tool_name == other.tool_name and self.args == other.args

    def __hash__(self) -> int:
        return hash((self.tool_name, tuple(sorted(self.args.items()))))


def _parse_scalar(text: str) -> Literal:
    text = text.strip()
    if not text:
        raise CallParseError("empty value")
    if text.startswith("'"):
        if len(text) < 2 or not text.endswith("'") or "'" in text[1:-1]:
            raise CallParseError(f"unterminated string: {text!r}")
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if _is_identifier(text):
        return Symbol(text)
    raise CallParseError(f"bad value literal: {text!r}")


def parse_call(text: str) -> ToolCall:
    """Parse ``name(k=v, ...)`` text into a :class:`ToolCall`.

    Accepts arguments in any order and tolerates surrounding whitespace;
    it does not require canonical key ordering (use
    :func:`is_canonical` for the strict check).
    """
    text = text.strip()
    open_idx = text.find("(")
    if open_idx <= 0 or not text.endswith(")"):
        raise CallParseError(f"not a call: {text!r}")
    name = text[:open_idx]
    if not _is_identifier(name):
        raise CallParseError(f"bad tool name: {name!r}")
    body = text[open_idx + 1 : -1]
    args: dict[str, Literal] = {}
    if body.strip():
        for part in _split_args(body):
            if "=" not in part:
                raise CallParseError(f"argument without '=': {part!r}")
            key, _, raw = part.partition("=")
            key = key.strip()
            if not _is_identifier(key):
                raise CallParseError(f"bad argument name: {key!r}")
            if key in args:
                raise CallParseError(f"duplicate argument: {key!r}")
            args[key] = _parse_scalar(raw)
    return ToolCall(tool_name=name, args=args)


def _split_args(body: str) -> list[str]:
    """Split on commas that are not inside single quotes."""
    parts, buf, quoted = [], [], False
    for ch in body:
        if ch == "'":
            quoted = not quoted
            buf.append(ch)
        elif ch == "," and not quoted:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if quoted:
        raise CallParseError(f"unterminated quote in: {body!r}")
    parts.append("".join(buf))
    return parts


def is_canonical(text: str) -> bool:
    """True iff ``text`` parses and re-renders byte-identically."""
    try:
        return parse_call(text).render() == text
    except CallParseError:
        return False


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    code: str  # missing_required | unknown_param | type_mismatch | enum_violation | range_violation | name_mismatch
    param: str
    message: str


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[Violation, ...]

    @property
    def valid(self) -> bool:
        return not self.violations


def _check_kind(spec: ParamSpec, value: Literal) -> Optional[Violation]:
    k = spec.kind
    if k is ParamKind.BOOLEAN:
        if not isinstance(value, bool):
            return Violation("type_mismatch", spec.name, f"{spec.name} expects boolean")
    elif k is ParamKind.INTEGER:
        if isinstance(value, bool) or not isinstance(value, int):
            return Violation("type_mismatch", spec.name, f"{spec.name} expects integer")
    elif k is ParamKind.NUMBER:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return Violation("type_mismatch", spec.name, f"{spec.name} expects number")
    elif k is ParamKind.STRING:
        if not isinstance(value, str) or isinstance(value, Symbol):
            return Violation("type_mismatch", spec.name, f"{spec.name} expects string")
    elif k is ParamKind.ENUM:
        if not isinstance(value, str):
            return Violation("type_mismatch", spec.name, f"{spec.name} expects enum member")
        if value not in spec.enum_values:
            return Violation(
                "enum_violation", spec.name,
                f"{value!r} not in {{{', '.join(spec.enum_values)}}}",
            )
    return None


def validate_call(schema: ToolSchema, call: ToolCall) -> ValidityReport:
    """List every violation of ``call`` against ``schema``; empty list == valid."""
    violations: list[Violation] = []
    if call.tool_name != schema.tool_name:
        violations.append(
            Violation("name_mismatch", "", f"call names {call.tool_name!r}, schema is {schema.tool_name!r}")
        )
    for spec in schema.params:
        if spec.required and spec.name not in call.args:
            violations.append(Violation("missing_required", spec.name, f"missing required {spec.name!r}"))
    for name, value in call.args.items():
        spec = schema.param(name)
        if spec is None:
            violations.append(Violation("unknown_param", name, f"unknown parameter {name!r}"))
            continue
        bad = _check_kind(spec, value)
        if bad is not None:
            violations.append(bad)
            continue
        if spec.range is not None and isinstance(value, (int, float)) and not isinstance(value, bool):
            lo, hi = spec.range
            if not (lo <= value <= hi):
                violations.append(
                    Violation("range_violation", name, f"{name}={value} outside [{lo}, {hi}]")
                )
    return ValidityReport(tuple(violations))


# ---------------------------------------------------------------------------
# Trajectories and synthetic episodes


@dataclass(frozen=True)
class Trajectory:
    """A (query, call) pair with a known success label."""

    query: str
    call: ToolCall
    label: bool = True


class PerturbKind(Enum):
    VALUE_SUBSTITUTION = "value_substitution"
    BOUNDARY_TESTING = "boundary_testing"
    PARAMETER_DROP = "parameter_drop"


@dataclass(frozen=True)
class SyntheticEpisode:
    base: Trajectory
    op_applied: PerturbKind
    perturbed_call: ToolCall
    reward: int  # 0 or 1, set by sandbox execution


#: Boundary values injected by the boundary-testing operator, in addition to
#: the declared range endpoints of the targeted parameter.  Configurable
#: because only "0, -1 and empty string" are forced; endpoints are a natural
#: extension of "edge cases".
DEFAULT_BOUNDARY_VALUES: tuple[Literal, ...] = (0, -1, "")


def _random_compliant_value(spec: ParamSpec, rng: random.Random, avoid: Literal) -> Literal:
    """A schema-compliant value for ``spec``, different from ``avoid`` when possible."""
    for _ in range(64):
        if spec.kind is ParamKind.ENUM:
            value: Literal = Symbol(rng.choice(spec.enum_values))
        elif spec.kind is ParamKind.BOOLEAN:
            value = rng.random() < 0.5
        elif spec.kind is ParamKind.INTEGER:
            lo, hi = spec.range if spec.range is not None else (-100, 100)
            value = rng.randint(int(lo), int(hi))
        elif spec.kind is ParamKind.NUMBER:
            lo, hi = spec.range if spec.range is not None else (-100.0, 100.0)
            value = round(rng.uniform(lo, hi), 3)
        else:  # STRING
            alphabet = "abcdefghijklmnopqrstuvwxyz"
            value = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 8)))
        if value != avoid:
            return value
    return value


def perturb(
    traj: Trajectory,
    kind: PerturbKind,
    rng: random.Random,
    schema: ToolSchema,
    boundary_values: Sequence[Literal] = DEFAULT_BOUNDARY_VALUES,
) -> ToolCall:
    """Apply one perturbation operator to ``traj.call``; returns the new call.

    Value substitution keeps the call schema-compliant; boundary testing may
    leave the schema's legal region on purpose; parameter drop removes one
    optional argument and fails with :class:`NoPerturbationPossible` when the
    call carries none.
    """
    call = traj.call
    if kind is PerturbKind.VALUE_SUBSTITUTION:
        if not call.args:
            raise NoPerturbationPossible("call has no arguments to substitute")
        name = rng.choice(sorted(call.args))
        spec = schema.param(name)
        if spec is None:
            raise NoPerturbationPossible(f"no spec for argument {name!r}")
        new_args = dict(call.args)
        new_args[name] = _random_compliant_value(spec, rng, avoid=call.args[name])
        return ToolCall(call.tool_name, new_args)

    if kind is PerturbKind.BOUNDARY_TESTING:
        if not call.args:
            raise NoPerturbationPossible("call has no arguments to inject into")
        name = rng.choice(sorted(call.args))
        spec = schema.param(name)
        candidates = list(boundary_values)
        if spec is not None and spec.range is not None:
            lo, hi = spec.range
            if spec.kind is ParamKind.INTEGER:
                lo, hi = int(lo), int(hi)
            candidates.extend([lo, hi])
        new_args = dict(call.args)
        new_args[name] = candidates[rng.randrange(len(candidates))]
        return ToolCall(call.tool_name, new_args)

    if kind is PerturbKind.PARAMETER_DROP:
        optional_present = [
            n for n in sorted(call.args) if (sp := schema.param(n)) is not None and not sp.required
        ]
        if not optional_present:
            raise NoPerturbationPossible("no optional parameters to drop")
        name = rng.choice(optional_present)
        new_args = {k: v for k, v in call.args.items() if k != name}
        return ToolCall(call.tool_name, new_args)

    raise ValueError(f"unknown perturbation kind: {kind}")


#: A sandbox executor maps a perturbed call to its binary reward.
SandboxExecutor = Callable[[ToolCall], int]


def schema_sandbox(
    schema: ToolSchema, checker: Optional[Callable[[ToolCall], bool]] = None
) -> SandboxExecutor:
    """Reward 1 iff the call validates against ``schema`` and ``checker`` accepts it."""

    def execute(call: ToolCall) -> int:
        if not validate_call(schema, call).valid:
            return 0
        if checker is not None and not checker(call):
            return 0
        return 1

    return execute


def generate_episodes(
    support: Sequence[Trajectory],
    n: int,
    schema: ToolSchema,
    sandbox: SandboxExecutor,
    seed: int,
) -> list[SyntheticEpisode]:
    """Produce ``n`` synthetic episodes by perturbing support trajectories.

    Deterministic for a fixed ``(support, n, schema, seed)``: the operator,
    target trajectory, and random draws all come from one seeded generator.
    """
    if not support:
        raise EmptySupport("support set is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    kinds = list(PerturbKind)
    episodes: list[SyntheticEpisode] = []
    while len(episodes) < n:
        traj = support[rng.randrange(len(support))]
        kind = kinds[rng.randrange(len(kinds))]
        try:
            perturbed = perturb(traj, kind, rng, schema)
        except NoPerturbationPossible:
            continue
        reward = 1 if sandbox(perturbed) else 0
        episodes.append(SyntheticEpisode(traj, kind, perturbed, reward))
    return episodes
