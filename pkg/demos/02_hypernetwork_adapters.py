"""Hypernetwork walkthrough: context in, LoRA adapters out.

The generator reads a documentation embedding plus a handful of support-call
embeddings and emits low-rank (A, B) pairs for the attention projections of
a small transformer.  A short behavior-cloning loop then shows the gradients
flowing from the adapted LM back through the generated adapters into the
hypernetwork itself.
"""

import numpy as np

from toollab.hypernet import (
    ContextVectors,
    Hypernet,
    HypernetConfig,
    count_params,
    generate_all,
    lora_state_for_lm,
    train_hypernet,
)
from toollab.lm import ToyTransformer, embed_text, greedy_decode

lm = ToyTransformer(n_layers=2, d_model=32, n_heads=2, max_context=64, seed=0)
config = HypernetConfig(
    d_model=32, r=4, factor=4, z_dim=8, doc_dim=384, n_layers=2,
    modules=("q", "v"), mlp_hidden=16,
)
net = Hypernet(config, seed=0)
print(f"hypernetwork parameters: {count_params(config):,}")

doc = "ping() checks that the service is alive; it takes no arguments."
support = ["ping()", "ping()"]
context = ContextVectors(
    v_doc=embed_text(doc),
    v_support=[embed_text(s) for s in support],
)

pairs = generate_all(net, context)
first = pairs[(0, "q")]
print(f"generated {len(pairs)} adapter pairs; "
      f"A is {first.A.shape}, B is {first.B.shape}")
print(f"initial adapter magnitude |B @ A| = {np.abs(first.B @ first.A).mean():.2e} "
      "(near zero by construction)")

prompt = "ping the server\nCall: "
lm.set_lora(None)
base_out = greedy_decode(lm, prompt, max_new=16)
lm.set_lora(lora_state_for_lm(pairs, config))
adapted_out = greedy_decode(lm, prompt, max_new=16)
print(f"\nbase LM output:    {base_out!r}")
print(f"adapted LM output: {adapted_out!r}")

episodes = [("ping the server", "ping()"), ("check liveness", "ping()")]
losses = train_hypernet(net, lm, episodes, doc_text=doc, support_texts=support,
                        steps=30, lr=5e-2, seed=0)
print(f"\ncloning loss over 30 steps: {losses[0]:.3f} -> {losses[-1]:.3f}")
