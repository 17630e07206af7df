"""Value-guided beam search over LM continuations.

Beams expand token by token (optionally constrained by a token DFA); a
candidate completes when the LM emits EOS, which the mask permits only in
accepting states.  Completed actions are ranked by

    score = logp + log(v)

the log-space form of likelihood times estimated success probability, which
preserves the argmax of the product while avoiding underflow.  With a
constant value function the ranking reduces to pure likelihood.  Ties break
lexicographically on the action text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .fsm import TokenDfa, mask_logits
from .lm import DEFAULT_MAX_NEW_TOKENS, LmBackend
from .value import ValueNet, predict, state_features


class DeadEnd(RuntimeError):
    """Every beam ran out of legal continuations before completing an action."""


#: Maps a completed action text to its success-probability estimate in (0, 1].
ValueFn = Callable[[str], float]


def constant_value(v: float = 1.0) -> ValueFn:
    if not 0.0 < v <= 1.0:
        raise ValueError("constant value must be in (0, 1]")
    return lambda _text: v


def net_value_fn(net: ValueNet, query: str, max_steps: int = 1) -> ValueFn:
    """Value function over candidate actions for a single-action task: the
    features are (query, candidate action, next step fraction), without any
    environment rollout."""

    def fn(action_text: str) -> float:
        return predict(net, state_features(query, action_text, 1, max_steps))

    return fn


@dataclass(frozen=True)
class Candidate:
    """A completed continuation with its LM log-likelihood."""

    action_text: str
    logp: float
    token_ids: tuple[int, ...]


@dataclass(frozen=True)
class ScoredCandidate:
    action_text: str
    logp: float
    v: float
    score: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    finite = np.isfinite(logits)
    out = np.full_like(logits, -np.inf, dtype=np.float64)
    if not finite.any():
        return out
    vals = logits[finite].astype(np.float64)
    m = vals.max()
    out[finite] = vals - m - math.log(np.exp(vals - m).sum())
    return out


def propose(
    backend: LmBackend,
    prompt: str,
    k: int,
    dfa: Optional[TokenDfa] = None,
    max_steps: int = DEFAULT_MAX_NEW_TOKENS,
) -> list[Candidate]:
    """Up to ``k`` highest-likelihood completed continuations.

    Token-level beam expansion with per-step pruning to ``k`` live beams;
    candidates complete on EOS (DFA-accepting states only, when constrained).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    vocab = backend.vocab
    prompt_ids = vocab.tokenize(prompt)
    start_state = dfa.start if dfa is not None else None
    beams: list[tuple[float, tuple[int, ...], Optional[int]]] = [(0.0, (), start_state)]
    completed: dict[tuple[int, ...], float] = {}
    for _ in range(max_steps):
        if not beams:
            break
        expansions: list[tuple[float, tuple[int, ...], Optional[int]]] = []
        for logp, generated, state in beams:
            logits = backend.next_logits(prompt_ids + list(generated))
            if dfa is not None:
                logits = mask_logits(logits, dfa.mask(state))
            logprobs = _log_softmax(logits)
            order = np.argsort(-logprobs, kind="stable")[: max(k, 1)]
            for token in order:
                token = int(token)
                lp = logprobs[token]
                if not np.isfinite(lp):
                    continue
                total = logp + float(lp)
                if token == vocab.eos_id:
                    prev = completed.get(generated)
                    if prev is None or total > prev:
                        completed[generated] = total
                    continue
                nxt = dfa.step(state, token) if dfa is not None else None
                if dfa is not None and nxt is None:
                    continue
                expansions.append((total, generated + (token,), nxt))
        expansions.sort(key=lambda b: (-b[0], b[1]))
        beams = expansions[:k]
        if len(completed) >= k and beams and beams[0][0] <= min(completed.values()):
            break
    if not completed:
        raise DeadEnd("no completed continuation within the step budget")
    # Distinct tokenizations of the same text collapse to the best-logp path.
    by_text: dict[str, Candidate] = {}
    for ids, logp in completed.items():
        text = vocab.detokenize(ids)
        prev = by_text.get(text)
        if prev is None or logp > prev.logp:
            by_text[text] = Candidate(text, logp, ids)
    out = sorted(by_text.values(), key=lambda c: (-c.logp, c.action_text))
    return out[:k]


def score(candidate: Candidate, value_fn: ValueFn) -> ScoredCandidate:
    """Combine LM likelihood with the value estimate of the successor state."""
    v = float(value_fn(candidate.action_text))
    if not 0.0 < v <= 1.0:
        raise ValueError(f"value estimate {v} outside (0, 1]")
    return ScoredCandidate(
        action_text=candidate.action_text,
        logp=candidate.logp,
        v=v,
        score=candidate.logp + math.log(v),
    )


def beam_decode(
    backend: LmBackend,
    prompt: str,
    value_fn: ValueFn,
    k: int,
    max_steps: int = DEFAULT_MAX_NEW_TOKENS,
    dfa: Optional[TokenDfa] = None,
) -> ScoredCandidate:
    """Highest-scoring completed action under likelihood-times-value ranking."""
    candidates = propose(backend, prompt, k, dfa=dfa, max_steps=max_steps)
    scored = [score(c, value_fn) for c in candidates]
    scored.sort(key=lambda c: (-c.score, c.action_text))
    return scored[0]
