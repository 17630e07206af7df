"""Constrained decoding walkthrough: schema -> regex -> automaton -> decode.

A tool schema compiles to a regular expression over canonical call text,
the regex lifts to a token-level automaton, and the automaton masks the
language model's logits at every step — so the model physically cannot emit
a malformed call.
"""

from toollab.fsm import build_char_dfa, build_token_dfa, compile_schema
from toollab.lm import ToyTransformer, byte_vocabulary, greedy_decode
from toollab.schema import ParamKind, ParamSpec, ToolSchema

schema = ToolSchema(
    "thermostat.set",
    (
        ParamSpec("mode", ParamKind.ENUM, enum_values=("heat", "cool", "off")),
        ParamSpec("boost", ParamKind.BOOLEAN, required=False),
    ),
)

pattern = compile_schema(schema)
print("compiled regex:")
print(f"  {pattern.regex_text}")

char_dfa = build_char_dfa(pattern)
print(f"\ncharacter automaton: {char_dfa.n_states} states")
print("full language of valid calls:")
for call in char_dfa.enumerate_language(max_len=64):
    print(f"  {call}")

vocab = byte_vocabulary()
token_dfa = build_token_dfa(pattern, vocab)
backend = ToyTransformer(max_context=128, seed=42)

prompt = "Set the thermostat to cooling mode.\nCall: "
unconstrained = greedy_decode(backend, prompt, max_new=48)
constrained = greedy_decode(backend, prompt, max_new=48, dfa=token_dfa)

print(f"\nunconstrained output: {unconstrained!r}")
print(f"constrained output:   {constrained!r}")
print(f"constrained output is in the schema language: "
      f"{char_dfa.accepts(constrained.encode())}")
