"""Value-guided beam search walkthrough.

A TD(0)-trained value net scores partial decodes; beam search re-ranks
constrained candidates by logp + log V.  With a constant value function the
ranking collapses back to pure likelihood — the guidance only matters when
the value net actually prefers some completions over others.
"""

from toollab.fsm import Pattern, build_token_dfa
from toollab.lm import byte_vocabulary, fit_ngram
from toollab.search import beam_decode, constant_value, net_value_fn, propose
from toollab.value import (
    ReplayBuffer,
    Transition,
    ValueNet,
    state_features,
    train_value,
)

vocab = byte_vocabulary()
backend = fit_ngram("f(a), f(b), f(a), f(c), g(a)", order=2)
dfa = build_token_dfa(Pattern(r"(f|g)\((a|b|c)\)"), vocab)

print("constrained candidates ranked by likelihood alone:")
for cand in propose(backend, "call: ", k=6, dfa=dfa, max_steps=8):
    print(f"  {cand.action_text:8s} logp = {cand.logp:7.3f}")

# train a value net that has seen g(a) succeed and f(a) fail
query = "invoke the right tool"
max_steps = 8
buffer = ReplayBuffer(capacity=1000)
for call, reward in [("g(a)", 1.0), ("f(a)", 0.0), ("f(b)", 0.0), ("f(c)", 0.0)] * 5:
    for step in range(len(call)):
        terminal = step == len(call) - 1
        buffer.add(Transition(
            s=state_features(query, call[:step], step, max_steps),
            a=0,
            r=reward if terminal else 0.0,
            s_next=state_features(query, call[:step + 1], step + 1, max_steps),
            terminal=terminal,
        ))
net = ValueNet(seed=42)
train_value(net, buffer, steps=2000, batch_size=16, step_size=0.05, seed=42)

value_fn = net_value_fn(net, query, max_steps=max_steps)
guided = beam_decode(backend, "call: ", value_fn, k=6, dfa=dfa, max_steps=max_steps)
neutral = beam_decode(backend, "call: ", constant_value(0.5), k=6, dfa=dfa,
                      max_steps=max_steps)

print(f"\nvalue-guided choice: {guided.action_text}  (score {guided.score:.3f})")
print(f"likelihood-only choice: {neutral.action_text}  (score {neutral.score:.3f})")
print(f"learned V(g(a)) = {value_fn('g(a)'):.3f}, V(f(a)) = {value_fn('f(a)'):.3f}")
