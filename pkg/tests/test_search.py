"""Beam search: exactness at full width, value weighting, tie-breaking."""

import math

import numpy as np
import pytest

from toollab.fsm import Pattern, build_token_dfa, enumerate_token_language, mask_logits
from toollab.lm import ScriptedBackend, byte_vocabulary, fit_ngram
from toollab.search import (
    DeadEnd,
    beam_decode,
    constant_value,
    net_value_fn,
    propose,
    score,
)
from toollab.search import _log_softmax  # noqa: F401  (oracle shares normalization)
from toollab.value import ValueNet, predict, state_features


VOCAB = byte_vocabulary()


def exhaustive_logp(backend, prompt: str, dfa, token_seq: tuple[int, ...]) -> float:
    """Independent scorer: walk the sequence, summing masked log-softmax terms."""
    prompt_ids = VOCAB.tokenize(prompt)
    state = dfa.start
    context = list(prompt_ids)
    total = 0.0
    for token in token_seq:
        logits = mask_logits(backend.next_logits(context), dfa.mask(state))
        total += float(_log_softmax(logits)[token])
        state = dfa.step(state, token)
        context.append(token)
    logits = mask_logits(backend.next_logits(context), dfa.mask(state))
    total += float(_log_softmax(logits)[VOCAB.eos_id])
    return total


class TestExactness:
    def setup_method(self):
        # biased but full-support backend over a 6-string language
        self.backend = fit_ngram("f(a), f(b), f(a), f(c), g(a)", order=2)
        self.dfa = build_token_dfa(Pattern("(f|g)\\((a|b|c)\\)"), VOCAB)
        self.language = list(enumerate_token_language(self.dfa))
        assert len(self.language) == 6

    def test_full_width_beam_equals_global_argmax(self):
        values = {}
        for i, seq in enumerate(sorted(self.language)):
            text = VOCAB.detokenize(seq)
            values[text] = 0.1 + 0.8 * (i % 3) / 2  # distinct, inside (0, 1]

        def value_fn(text):
            return values[text]

        # oracle: score every language string directly
        oracle = max(
            (
                exhaustive_logp(self.backend, "call: ", self.dfa, seq)
                + math.log(values[VOCAB.detokenize(seq)]),
                VOCAB.detokenize(seq),
            )
            for seq in self.language
        )
        best = beam_decode(
            self.backend, "call: ", value_fn, k=len(self.language), dfa=self.dfa, max_steps=8
        )
        assert best.action_text == oracle[1]
        assert math.isclose(best.score, oracle[0], rel_tol=1e-6)

    def test_propose_logp_matches_exhaustive(self):
        candidates = propose(self.backend, "call: ", k=6, dfa=self.dfa, max_steps=8)
        assert len(candidates) == 6
        for c in candidates:
            assert math.isclose(
                c.logp, exhaustive_logp(self.backend, "call: ", self.dfa, c.token_ids),
                rel_tol=1e-6,
            )

    def test_constant_value_preserves_likelihood_argmax(self):
        top_by_logp = propose(self.backend, "call: ", k=6, dfa=self.dfa, max_steps=8)[0]
        for v in (1.0, 0.5, 0.01):
            best = beam_decode(
                self.backend, "call: ", constant_value(v), k=6, dfa=self.dfa, max_steps=8
            )
            assert best.action_text == top_by_logp.action_text


class TestEdgeBehavior:
    def test_tie_breaks_lexicographically(self):
        backend = ScriptedBackend(VOCAB, script={})  # uniform everywhere
        dfa = build_token_dfa(Pattern("(a|b)"), VOCAB)
        candidates = propose(backend, "", k=2, dfa=dfa, max_steps=4)
        assert [c.action_text for c in candidates] == ["a", "b"]
        assert candidates[0].logp == candidates[1].logp

    def test_dead_end_when_budget_too_small(self):
        backend = ScriptedBackend(VOCAB, script={})
        dfa = build_token_dfa(Pattern("abcd"), VOCAB)
        with pytest.raises(DeadEnd):
            propose(backend, "", k=2, dfa=dfa, max_steps=2)

    def test_score_rejects_out_of_range_values(self):
        candidates = propose(ScriptedBackend(VOCAB, {}), "", k=1,
                             dfa=build_token_dfa(Pattern("a"), VOCAB), max_steps=2)
        with pytest.raises(ValueError):
            score(candidates[0], lambda _t: 0.0)
        with pytest.raises(ValueError):
            score(candidates[0], lambda _t: 1.5)

    def test_constant_value_validation(self):
        with pytest.raises(ValueError):
            constant_value(0.0)

    def test_net_value_fn_agrees_with_predict(self):
        net = ValueNet(seed=0)
        fn = net_value_fn(net, "the query", max_steps=4)
        direct = predict(net, state_features("the query", "f(a)", 1, 4))
        assert fn("f(a)") == direct
