"""toollab: a desk-scale laboratory for schema-constrained tool calling.

Layers, bottom to top:

- :mod:`toollab.schema` -- tool schemas, canonical call text, perturbation.
- :mod:`toollab.fsm` -- schema -> regex -> byte DFA -> token DFA, logit masks.
- :mod:`toollab.lm` -- byte vocabulary, n-gram and toy-transformer backends,
  constrained greedy decoding, the remote-bridge client.
- :mod:`toollab.hypernet` -- factorized LoRA-generating hypernetwork.
- :mod:`toollab.value` -- TD(0)-trained state-value estimator.
- :mod:`toollab.search` -- value-guided beam search over the token DFA.
- :mod:`toollab.memory` -- exact cosine k-NN episode store.
- :mod:`toollab.prompts` -- byte-exact prompt assembly and noise injection.
- :mod:`toollab.harness` -- task suites, graders, and the ablation grid.

Submodules that need torch (lm, hypernet, value, search, harness) load
lazily, so schema/regex work never pays the import cost.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "schema",
    "fsm",
    "lm",
    "hypernet",
    "value",
    "search",
    "memory",
    "prompts",
    "harness",
    "checkpoint",
    "cli",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
