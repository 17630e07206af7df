"""Schema-to-regex compilation, token-level DFAs, and logit masking.

The pipeline is: :func:`compile_schema` turns a :class:`~toollab.schema.ToolSchema`
into a :class:`Pattern` (a regular expression over canonical call text);
:func:`build_char_dfa` lowers the pattern to a byte-level DFA; and
:func:`build_token_dfa` lifts that to a DFA over an arbitrary tokenizer
vocabulary, where one transition consumes one (possibly multi-byte) token.
During generation, :func:`mask_logits` sets the logits of tokens that would
leave the automaton's legal transitions to -inf, so any decode loop that only
samples finite-logit tokens and stops in an accepting state emits a string the
schema's validator accepts.

The regex subset is deliberately small: literals, character classes,
grouping, alternation, optionality, and bounded/unbounded repetition.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .schema import ParamKind, ParamSpec, ToolSchema

DEFAULT_STATE_BUDGET = 100_000
DEFAULT_STRING_CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789_"
DEFAULT_STRING_MAX_LEN = 64
DEFAULT_INT_RANGE_CAP = 1024


class UnsupportedSchemaFeature(ValueError):
    """The schema uses a parameter form the compiler cannot express exactly."""


class StateBudgetExceeded(RuntimeError):
    """Determinization would exceed the configured state cap."""


class InvalidState(KeyError):
    """A state id outside the automaton was supplied."""


class DimensionMismatch(ValueError):
    """Vector length does not match the vocabulary size."""


class RegexSyntaxError(ValueError):
    """The pattern text is outside the supported regex subset."""


class DeadLanguageWarning(UserWarning):
    """The token DFA has no accepting path (vocabulary cannot spell the language)."""


@dataclass(frozen=True)
class Pattern:
    """A canonical regular expression derived from a tool schema."""

    regex_text: str


# ---------------------------------------------------------------------------
# Schema -> regex

_REGEX_SPECIALS = set("()[]{}|?*+.\\^$-")


def _escape(text: str) -> str:
    return "".join("\\" + c if c in _REGEX_SPECIALS else c for c in text)


def _class_escape(text: str) -> str:
    return "".join("\\" + c if c in "[]\\^-" else c for c in text)


def _value_pattern(
    spec: ParamSpec,
    string_charset: str,
    string_max_len: int,
    int_range_cap: int,
) -> str:
    if spec.kind is ParamKind.ENUM:
        return "(" + "|".join(_escape(v) for v in spec.enum_values) + ")"
    if spec.kind is ParamKind.BOOLEAN:
        return "(true|false)"
    if spec.kind is ParamKind.INTEGER:
        if spec.range is not None:
            lo, hi = int(spec.range[0]), int(spec.range[1])
            if hi - lo + 1 > int_range_cap:
                raise UnsupportedSchemaFeature(
                    f"{spec.name!r}: integer range of {hi - lo + 1} values exceeds "
                    f"the exact-alternation cap ({int_range_cap})"
                )
            return "(" + "|".join(_escape(str(v)) for v in range(lo, hi + 1)) + ")"
        return "(0|\\-?[1-9][0-9]*)"
    if spec.kind is ParamKind.NUMBER:
        if spec.range is not None:
            raise UnsupportedSchemaFeature(
                f"{spec.name!r}: ranged number parameters have no exact regular form"
            )
        return "(\\-?(0|[1-9][0-9]*)\\.[0-9]+)"
    if spec.kind is ParamKind.STRING:
        cls = "[" + _class_escape(string_charset) + "]"
        return f"'{cls}{{0,{string_max_len}}}'"
    raise UnsupportedSchemaFeature(f"unsupported parameter kind: {spec.kind}")


def compile_schema(
    schema: ToolSchema,
    string_charset: str = DEFAULT_STRING_CHARSET,
    string_max_len: int = DEFAULT_STRING_MAX_LEN,
    int_range_cap: int = DEFAULT_INT_RANGE_CAP,
) -> Pattern:
    """Regex matching exactly the canonical serializations of valid calls.

    Parameters appear in sorted order; every subset of optional parameters
    yields one alternative (optionals are few in practice, so the expansion
    stays small).  String values are restricted to ``string_charset`` up to
    ``string_max_len`` characters to keep the automaton finite.
    """
    specs = sorted(schema.params, key=lambda p: p.name)
    optional = [p for p in specs if not p.required]
    if len(optional) > 12:
        raise UnsupportedSchemaFeature("too many optional parameters to expand exactly")
    value_pats = {
        p.name: _value_pattern(p, string_charset, string_max_len, int_range_cap) for p in specs
    }

    alternatives = []
    for mask in range(1 << len(optional)):
        chosen = {optional[i].name for i in range(len(optional)) if mask >> i & 1}
        parts = [
            f"{_escape(p.name)}={value_pats[p.name]}"
            for p in specs
            if p.required or p.name in chosen
        ]
        alternatives.append(", ".join(parts))
    alternatives = sorted(set(alternatives), key=lambda a: (len(a), a))
    body = "|".join(alternatives) if len(alternatives) == 1 else "(" + "|".join(alternatives) + ")"
    if alternatives == [""]:
        body = ""
    return Pattern(regex_text=f"{_escape(schema.tool_name)}\\({body}\\)")


# ---------------------------------------------------------------------------
# Regex subset parser -> AST


@dataclass(frozen=True)
class _Lit:
    chars: frozenset[int]  # byte values this atom matches


@dataclass(frozen=True)
class _Concat:
    parts: tuple


@dataclass(frozen=True)
class _Alt:
    options: tuple


@dataclass(frozen=True)
class _Repeat:
    node: object
    lo: int
    hi: Optional[int]  # None = unbounded


class _RegexParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.text[self.pos] if self.pos < len(self.text) else None

    def take(self) -> str:
        ch = self.text[self.pos]
        self.pos += 1
        return ch

    def parse(self):
        node = self.alternation()
        if self.pos != len(self.text):
            raise RegexSyntaxError(f"trailing input at {self.pos}: {self.text[self.pos:]!r}")
        return node

    def alternation(self):
        options = [self.concatenation()]
        while self.peek() == "|":
            self.take()
            options.append(self.concatenation())
        return options[0] if len(options) == 1 else _Alt(tuple(options))

    def concatenation(self):
        parts = []
        while (ch := self.peek()) is not None and ch not in "|)":
            parts.append(self.quantified())
        if not parts:
            return _Concat(())
        return parts[0] if len(parts) == 1 else _Concat(tuple(parts))

    def quantified(self):
        node = self.atom()
        ch = self.peek()
        if ch == "?":
            self.take()
            return _Repeat(node, 0, 1)
        if ch == "*":
            self.take()
            return _Repeat(node, 0, None)
        if ch == "+":
            self.take()
            return _Repeat(node, 1, None)
        if ch == "{":
            self.take()
            lo = self._int()
            hi: Optional[int] = lo
            if self.peek() == ",":
                self.take()
                hi = self._int() if self.peek() != "}" else None
            if self.take() != "}":
                raise RegexSyntaxError("unterminated {m,n}")
            if hi is not None and hi < lo:
                raise RegexSyntaxError("bad repetition bounds")
            return _Repeat(node, lo, hi)
        return node

    def _int(self) -> int:
        digits = ""
        while (ch := self.peek()) is not None and ch.isdigit():
            digits += self.take()
        if not digits:
            raise RegexSyntaxError("expected integer in quantifier")
        return int(digits)

    def atom(self):
        ch = self.take()
        if ch == "(":
            node = self.alternation()
            if self.peek() != ")":
                raise RegexSyntaxError("unbalanced parenthesis")
            self.take()
            return node
        if ch == "[":
            return self.char_class()
        if ch == "\\":
            if self.peek() is None:
                raise RegexSyntaxError("dangling escape")
            return _Lit(frozenset(self.take().encode("utf-8", "surrogateescape")))
        if ch in ")|?*+{}":
            raise RegexSyntaxError(f"unexpected {ch!r}")
        return _Lit(frozenset(ch.encode("utf-8")))

    def char_class(self):
        chars: set[int] = set()
        if self.peek() == "^":
            raise RegexSyntaxError("negated classes unsupported")
        while (ch := self.peek()) is not None and ch != "]":
            self.take()
            if ch == "\\":
                ch = self.take()
            if self.peek() == "-" and self.pos + 1 < len(self.text) and self.text[self.pos + 1] != "]":
                self.take()
                hi = self.take()
                if hi == "\\":
                    hi = self.take()
                if ord(hi) < ord(ch):
                    raise RegexSyntaxError(f"bad class range {ch}-{hi}")
                chars.update(range(ord(ch), ord(hi) + 1))
            else:
                chars.add(ord(ch))
        if self.peek() != "]":
            raise RegexSyntaxError("unterminated character class")
        self.take()
        if not chars:
            raise RegexSyntaxError("empty character class")
        if max(chars) > 0xFF:
            raise RegexSyntaxError("non-byte characters unsupported")
        return _Lit(frozenset(chars))


# ---------------------------------------------------------------------------
# NFA (Thompson) and DFA (subset construction)


class _Nfa:
    def __init__(self) -> None:
        self.transitions: list[dict[int, set[int]]] = []  # state -> byte -> {states}
        self.epsilon: list[set[int]] = []

    def new_state(self) -> int:
        self.transitions.append({})
        self.epsilon.append(set())
        return len(self.transitions) - 1

    def add(self, src: int, byte: int, dst: int) -> None:
        self.transitions[src].setdefault(byte, set()).add(dst)

    def add_eps(self, src: int, dst: int) -> None:
        self.epsilon[src].add(dst)


def _build_nfa(node, nfa: _Nfa) -> tuple[int, int]:
    """Thompson construction; returns (entry, exit) state ids."""
    if isinstance(node, _Lit):
        a, b = nfa.new_state(), nfa.new_state()
        for byte in node.chars:
            nfa.add(a, byte, b)
        return a, b
    if isinstance(node, _Concat):
        a = nfa.new_state()
        cur = a
        for part in node.parts:
            entry, exit_ = _build_nfa(part, nfa)
            nfa.add_eps(cur, entry)
            cur = exit_
        return a, cur
    if isinstance(node, _Alt):
        a, b = nfa.new_state(), nfa.new_state()
        for opt in node.options:
            entry, exit_ = _build_nfa(opt, nfa)
            nfa.add_eps(a, entry)
            nfa.add_eps(exit_, b)
        return a, b
    if isinstance(node, _Repeat):
        a = nfa.new_state()
        cur = a
        for _ in range(node.lo):
            entry, exit_ = _build_nfa(node.node, nfa)
            nfa.add_eps(cur, entry)
            cur = exit_
        if node.hi is None:
            entry, exit_ = _build_nfa(node.node, nfa)
            nfa.add_eps(cur, entry)
            nfa.add_eps(exit_, entry)
            end = nfa.new_state()
            nfa.add_eps(cur, end)
            nfa.add_eps(exit_, end)
            return a, end
        end = nfa.new_state()
        nfa.add_eps(cur, end)
        for _ in range(node.hi - node.lo):
            entry, exit_ = _build_nfa(node.node, nfa)
            nfa.add_eps(cur, entry)
            cur = exit_
            nfa.add_eps(cur, end)
        return a, end
    raise TypeError(f"unknown AST node: {node!r}")


@dataclass
class CharDfa:
    """Deterministic automaton over bytes."""

    transitions: list[dict[int, int]]  # state -> byte -> state
    start: int
    accepting: frozenset[int]

    @property
    def n_states(self) -> int:
        return len(self.transitions)

    def step(self, state: int, byte: int) -> Optional[int]:
        if not 0 <= state < len(self.transitions):
            raise InvalidState(state)
        return self.transitions[state].get(byte)

    def accepts(self, data: bytes) -> bool:
        state: Optional[int] = self.start
        for byte in data:
            state = self.transitions[state].get(byte)  # type: ignore[index]
            if state is None:
                return False
        return state in self.accepting

    def enumerate_language(self, max_len: int, limit: int = 1_000_000) -> list[str]:
        """All accepted strings of length <= ``max_len`` (lexicographic order)."""
        out: list[str] = []
        stack: list[tuple[int, bytes]] = [(self.start, b"")]
        while stack:
            state, prefix = stack.pop()
            if state in self.accepting:
                out.append(prefix.decode("utf-8", "surrogateescape"))
                if len(out) > limit:
                    raise RuntimeError("language enumeration limit exceeded")
            if len(prefix) < max_len:
                for byte in sorted(self.transitions[state], reverse=True):
                    stack.append((self.transitions[state][byte], prefix + bytes([byte])))
        return sorted(out)


def _eps_closure(nfa: _Nfa, states: frozenset[int]) -> frozenset[int]:
    seen = set(states)
    stack = list(states)
    while stack:
        s = stack.pop()
        for t in nfa.epsilon[s]:
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return frozenset(seen)


def build_char_dfa(pattern: Pattern, state_budget: int = DEFAULT_STATE_BUDGET) -> CharDfa:
    """Parse the pattern and determinize it via subset construction."""
    ast = _RegexParser(pattern.regex_text).parse()
    nfa = _Nfa()
    entry, exit_ = _build_nfa(ast, nfa)

    start = _eps_closure(nfa, frozenset([entry]))
    ids: dict[frozenset[int], int] = {start: 0}
    transitions: list[dict[int, int]] = [{}]
    accepting: set[int] = set()
    queue = [start]
    while queue:
        subset = queue.pop()
        sid = ids[subset]
        if exit_ in subset:
            accepting.add(sid)
        by_byte: dict[int, set[int]] = {}
        for s in subset:
            for byte, targets in nfa.transitions[s].items():
                by_byte.setdefault(byte, set()).update(targets)
        for byte, targets in by_byte.items():
            closure = _eps_closure(nfa, frozenset(targets))
            if closure not in ids:
                if len(ids) >= state_budget:
                    raise StateBudgetExceeded(f"more than {state_budget} DFA states")
                ids[closure] = len(ids)
                transitions.append({})
                queue.append(closure)
            transitions[sid][byte] = ids[closure]
    dfa = CharDfa(transitions=transitions, start=0, accepting=frozenset(accepting))
    return _trim_dead(dfa)


def _trim_dead(dfa: CharDfa) -> CharDfa:
    """Drop states from which no accepting state is reachable."""
    reverse: dict[int, set[int]] = {}
    for src, edges in enumerate(dfa.transitions):
        for dst in edges.values():
            reverse.setdefault(dst, set()).add(src)
    live = set(dfa.accepting)
    stack = list(live)
    while stack:
        s = stack.pop()
        for p in reverse.get(s, ()):
            if p not in live:
                live.add(p)
                stack.append(p)
    if dfa.start not in live:
        # Empty language; keep the bare start state.
        return CharDfa(transitions=[{}], start=0, accepting=frozenset())
    remap = {old: new for new, old in enumerate(sorted(live))}
    transitions = [
        {b: remap[t] for b, t in dfa.transitions[old].items() if t in live}
        for old in sorted(live)
    ]
    return CharDfa(
        transitions=transitions,
        start=remap[dfa.start],
        accepting=frozenset(remap[s] for s in dfa.accepting),
    )


# ---------------------------------------------------------------------------
# Token-level DFA over a tokenizer vocabulary


@dataclass(frozen=True)
class TokenMask:
    """Boolean bitset over the vocabulary; True = token permitted."""

    allowed: np.ndarray  # bool, shape (vocab_size,)

    @property
    def n_allowed(self) -> int:
        return int(self.allowed.sum())


@dataclass
class TokenDfa:
    """DFA whose transitions consume whole tokens of a vocabulary.

    State ids are shared with the underlying character DFA.  EOS is permitted
    exactly in accepting states (finishing a generation anywhere else would
    leave the canonical call unterminated).
    """

    transitions: list[dict[int, int]]  # state -> token id -> state
    start: int
    accepting: frozenset[int]
    vocab_size: int
    eos_id: int
    _masks: dict[int, TokenMask] = field(default_factory=dict, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.transitions)

    def step(self, state: int, token: int) -> Optional[int]:
        """Successor state, or None when the token violates the automaton."""
        if not 0 <= state < len(self.transitions):
            raise InvalidState(state)
        return self.transitions[state].get(token)

    def mask(self, state: int) -> TokenMask:
        """Permitted tokens in ``state`` (EOS iff accepting). Cached per state."""
        if not 0 <= state < len(self.transitions):
            raise InvalidState(state)
        cached = self._masks.get(state)
        if cached is not None:
            return cached
        allowed = np.zeros(self.vocab_size, dtype=bool)
        for token in self.transitions[state]:
            allowed[token] = True
        if state in self.accepting:
            allowed[self.eos_id] = True
        mask = TokenMask(allowed)
        self._masks[state] = mask
        return mask

    def accepts(self, tokens: Sequence[int]) -> bool:
        state: Optional[int] = self.start
        for token in tokens:
            if token == self.eos_id:
                return False
            state = self.transitions[state].get(token)  # type: ignore[index]
            if state is None:
                return False
        return state in self.accepting

    def to_dot(self) -> str:
        """GraphViz DOT text for inspection."""
        lines = ["digraph token_dfa {", "  rankdir=LR;"]
        for s in range(self.n_states):
            shape = "doublecircle" if s in self.accepting else "circle"
            lines.append(f'  {s} [shape={shape}];')
        lines.append(f"  start [shape=point]; start -> {self.start};")
        for src, edges in enumerate(self.transitions):
            for token, dst in sorted(edges.items()):
                lines.append(f'  {src} -> {dst} [label="{token}"];')
        lines.append("}")
        return "\n".join(lines)


def build_token_dfa(
    pattern: Pattern,
    vocab: "Vocabulary",
    state_budget: int = DEFAULT_STATE_BUDGET,
) -> TokenDfa:
    """Lift the pattern's byte DFA to the given tokenizer vocabulary.

    A (state, token) transition exists iff feeding the token's bytes from
    ``state`` stays inside the trimmed (live) character DFA.  A token sequence
    is accepted exactly when its byte expansion is in the pattern's language.
    """
    char_dfa = build_char_dfa(pattern, state_budget=state_budget)
    transitions: list[dict[int, int]] = [{} for _ in range(char_dfa.n_states)]
    for state in range(char_dfa.n_states):
        for token_id, data in vocab.items():
            if token_id == vocab.eos_id or not data:
                continue
            cur: Optional[int] = state
            for byte in data:
                cur = char_dfa.transitions[cur].get(byte)  # type: ignore[index]
                if cur is None:
                    break
            if cur is not None:
                transitions[state][token_id] = cur
    dfa = TokenDfa(
        transitions=transitions,
        start=char_dfa.start,
        accepting=char_dfa.accepting,
        vocab_size=vocab.size,
        eos_id=vocab.eos_id,
    )
    if not _has_accepting_path(dfa):
        warnings.warn(
            "vocabulary cannot spell any string of the pattern", DeadLanguageWarning
        )
    return dfa


def _has_accepting_path(dfa: TokenDfa) -> bool:
    seen = {dfa.start}
    stack = [dfa.start]
    while stack:
        s = stack.pop()
        if s in dfa.accepting:
            return True
        for t in dfa.transitions[s].values():
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return False


def enumerate_token_language(dfa: TokenDfa, max_tokens: int = 128) -> Iterator[tuple[int, ...]]:
    """Yield accepted token sequences up to ``max_tokens`` tokens (DFS order)."""
    stack: list[tuple[int, tuple[int, ...]]] = [(dfa.start, ())]
    while stack:
        state, prefix = stack.pop()
        if state in dfa.accepting:
            yield prefix
        if len(prefix) < max_tokens:
            for token in sorted(dfa.transitions[state], reverse=True):
                stack.append((dfa.transitions[state][token], prefix + (token,)))


def mask_logits(logits: np.ndarray, mask: TokenMask) -> np.ndarray:
    """Return a copy with disallowed entries at -inf; allowed entries untouched."""
    logits = np.asarray(logits)
    if logits.shape != mask.allowed.shape:
        raise DimensionMismatch(
            f"logits shape {logits.shape} vs mask shape {mask.allowed.shape}"
        )
    out = logits.copy()
    out[~mask.allowed] = -np.inf
    return out
