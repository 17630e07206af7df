"""Factorized hypernetwork: task context in, LoRA adapter pairs out.

Three stages: (1) a prototype aggregator cross-attends over support-example
embeddings with the documentation embedding as the query; (2) a shared MLP
maps the concatenated context to a base latent, which a learned embedding
table shifts per (layer, module, matrix, factor-side); (3) small projection
heads emit factor matrices whose products are the adapter matrices
``A (r x d)`` and ``B (d x r)``.  The factorization keeps the output heads
linear in ``d`` at fixed factor width instead of linear in ``d * r``.

The generated pair is applied as the standard low-rank update
``W' = W + (alpha / r) * B @ A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .lm import ToyTransformer, embed_text
from .schema import EmptySupport


class DimensionMismatch(ValueError):
    """An input vector's width disagrees with the configuration."""


class InvalidIndex(IndexError):
    """A (layer, module, matrix, side) index falls outside the embedding table."""


MODULES = ("q", "k", "v")
MATRICES = ("A", "B")
SIDES = ("left", "right")


@dataclass(frozen=True)
class HypernetConfig:
    d_model: int
    r: int = 16
    alpha: float = 32.0
    factor: int = 64
    z_dim: int = 512
    doc_dim: int = 384
    n_layers: int = 7
    modules: tuple[str, ...] = MODULES
    mlp_hidden: int = 2048

    def __post_init__(self) -> None:
        for name in ("d_model", "r", "factor", "z_dim", "doc_dim", "n_layers", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_embeddings(self) -> int:
        # One row per (layer, module, matrix, factor side).
        return self.n_layers * len(self.modules) * len(MATRICES) * len(SIDES)

    def embedding_index(self, layer: int, module: str, matrix: str, side: str) -> int:
        if not 0 <= layer < self.n_layers:
            raise InvalidIndex(f"layer {layer} outside 0..{self.n_layers - 1}")
        try:
            m = self.modules.index(module)
            mat = MATRICES.index(matrix)
            sd = SIDES.index(side)
        except ValueError as exc:
            raise InvalidIndex(str(exc)) from None
        return ((layer * len(self.modules) + m) * len(MATRICES) + mat) * len(SIDES) + sd


@dataclass(frozen=True)
class LoraPair:
    """One generated adapter: A is (r, d), B is (d, r)."""

    A: np.ndarray
    B: np.ndarray
    layer: int
    module: str


@dataclass
class ContextVectors:
    """Documentation embedding, support embeddings, and their aggregate."""

    v_doc: np.ndarray
    v_support: list[np.ndarray]
    v_proto: Optional[np.ndarray] = None


class Hypernet(nn.Module):
    """All learnable tensors of the generator (see module docstring)."""

    def __init__(self, config: HypernetConfig, seed: int = 42):
        super().__init__()
        torch.manual_seed(seed)
        self.config = config
        d, r, f, z = config.doc_dim, config.r, config.factor, config.z_dim
        self.attn_q = nn.Linear(d, d, bias=False)
        self.attn_k = nn.Linear(d, d, bias=False)
        self.attn_v = nn.Linear(d, d, bias=False)
        self.mlp = nn.Sequential(
            nn.Linear(2 * d, config.mlp_hidden),
            nn.ReLU(),
            nn.Linear(config.mlp_hidden, z),
        )
        self.layer_embeddings = nn.Embedding(config.n_embeddings, z)
        nn.init.normal_(self.layer_embeddings.weight, std=0.02)
        dm = config.d_model
        self.proj_A_left = nn.Linear(z, r * f)
        self.proj_A_right = nn.Linear(z, f * dm)
        self.proj_B_left = nn.Linear(z, dm * f)
        self.proj_B_right = nn.Linear(z, f * r)
        # Small output scale so freshly generated adapters start near zero.
        for head in (self.proj_A_left, self.proj_A_right, self.proj_B_left, self.proj_B_right):
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)

    # -- stage 1: prototype aggregation ------------------------------------

    def aggregate_prototype(self, v_doc: torch.Tensor, v_support: torch.Tensor) -> torch.Tensor:
        """Attention-weighted convex combination of value-projected supports.

        ``v_doc`` is (doc_dim,), ``v_support`` is (n, doc_dim); weights are a
        softmax over scaled dot products, so they sum to one.
        """
        cfg = self.config
        if v_doc.shape != (cfg.doc_dim,):
            raise DimensionMismatch(f"v_doc shape {tuple(v_doc.shape)} != ({cfg.doc_dim},)")
        if v_support.ndim != 2 or v_support.shape[1] != cfg.doc_dim:
            raise DimensionMismatch(f"v_support shape {tuple(v_support.shape)}")
        if v_support.shape[0] == 0:
            raise EmptySupport("no support vectors")
        q = self.attn_q(v_doc)
        k = self.attn_k(v_support)
        v = self.attn_v(v_support)
        scores = (k @ q) / (cfg.doc_dim ** 0.5)
        weights = torch.softmax(scores, dim=0)
        return weights @ v

    # -- stage 2: shared latent and layer embeddings ------------------------

    def base_latent(self, v_doc: torch.Tensor, v_proto: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if v_doc.shape != (cfg.doc_dim,) or v_proto.shape != (cfg.doc_dim,):
            raise DimensionMismatch("context vectors must be (doc_dim,)")
        return self.mlp(torch.cat([v_doc, v_proto]))

    def latent_for(self, z_base: torch.Tensor, layer: int, module: str, matrix: str, side: str) -> torch.Tensor:
        idx = self.config.embedding_index(layer, module, matrix, side)
        row = self.layer_embeddings(torch.tensor(idx))
        return z_base + row

    # -- stage 3: factorized generation -------------------------------------

    def lora_tensors(self, z_base: torch.Tensor, layer: int, module: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Differentiable (A, B) for one (layer, module); shapes (r, d), (d, r)."""
        cfg = self.config
        r, f, dm = cfg.r, cfg.factor, cfg.d_model
        z_al = self.latent_for(z_base, layer, module, "A", "left")
        z_ar = self.latent_for(z_base, layer, module, "A", "right")
        z_bl = self.latent_for(z_base, layer, module, "B", "left")
        z_br = self.latent_for(z_base, layer, module, "B", "right")
        a = self.proj_A_left(z_al).view(r, f) @ self.proj_A_right(z_ar).view(f, dm)
        b = self.proj_B_left(z_bl).view(dm, f) @ self.proj_B_right(z_br).view(f, r)
        return a, b

    def forward(self, v_doc: torch.Tensor, v_support: torch.Tensor) -> dict[tuple[int, str], tuple[torch.Tensor, torch.Tensor]]:
        """All adapter pairs for the configured layers and modules."""
        v_proto = self.aggregate_prototype(v_doc, v_support)
        z_base = self.base_latent(v_doc, v_proto)
        return {
            (layer, module): self.lora_tensors(z_base, layer, module)
            for layer in range(self.config.n_layers)
            for module in self.config.modules
        }


# ---------------------------------------------------------------------------
# Spec-surface wrappers (numpy in / numpy out)


def _tensor(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.get_default_dtype())


def aggregate_prototype(net: Hypernet, v_doc: np.ndarray, v_support: Sequence[np.ndarray]) -> np.ndarray:
    support = _tensor(np.stack(list(v_support))) if len(v_support) else torch.zeros(0, net.config.doc_dim)
    with torch.no_grad():
        return net.aggregate_prototype(_tensor(v_doc), support).numpy()


def base_latent(net: Hypernet, v_doc: np.ndarray, v_proto: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return net.base_latent(_tensor(v_doc), _tensor(v_proto)).numpy()


def latent_for(net: Hypernet, z_base: np.ndarray, layer: int, module: str, matrix: str, side: str) -> np.ndarray:
    with torch.no_grad():
        return net.latent_for(_tensor(z_base), layer, module, matrix, side).numpy()


def generate_lora(net: Hypernet, context: ContextVectors, layer: int, module: str) -> LoraPair:
    """Generate one adapter pair from a task context."""
    with torch.no_grad():
        v_doc = _tensor(context.v_doc)
        if context.v_proto is not None:
            v_proto = _tensor(context.v_proto)
        else:
            v_proto = net.aggregate_prototype(v_doc, _tensor(np.stack(context.v_support)))
        z_base = net.base_latent(v_doc, v_proto)
        a, b = net.lora_tensors(z_base, layer, module)
    a_np, b_np = a.numpy(), b.numpy()
    if not (np.isfinite(a_np).all() and np.isfinite(b_np).all()):
        raise FloatingPointError("non-finite adapter entries")
    return LoraPair(A=a_np, B=b_np, layer=layer, module=module)


def generate_all(net: Hypernet, context: ContextVectors) -> dict[tuple[int, str], LoraPair]:
    return {
        (layer, module): generate_lora(net, context, layer, module)
        for layer in range(net.config.n_layers)
        for module in net.config.modules
    }


def apply_lora(w: np.ndarray, pair: LoraPair, alpha: float, r: int) -> np.ndarray:
    """``W' = W + (alpha / r) * B @ A``; shapes must agree with the pair."""
    w = np.asarray(w)
    delta = pair.B @ pair.A
    if delta.shape != w.shape:
        raise DimensionMismatch(f"delta shape {delta.shape} vs W shape {w.shape}")
    return w + (alpha / r) * delta


def lora_state_for_lm(pairs: dict[tuple[int, str], LoraPair], config: HypernetConfig) -> dict:
    """Adapter dict consumable by :class:`~toollab.lm.ToyTransformer`."""
    scale = config.alpha / config.r
    return {
        key: (torch.as_tensor(p.A, dtype=torch.get_default_dtype()),
              torch.as_tensor(p.B, dtype=torch.get_default_dtype()),
              scale)
        for key, p in pairs.items()
    }


# ---------------------------------------------------------------------------
# Parameter accounting


def count_params(config: HypernetConfig, encoder_params: int = 0) -> int:
    """Closed-form learnable-scalar count of a :class:`Hypernet`.

    ``encoder_params`` adds an external document encoder's size when one is
    configured (the built-in trigram-hash embedder has no parameters).
    """
    d, r, f, z, dm, h = (
        config.doc_dim, config.r, config.factor, config.z_dim, config.d_model, config.mlp_hidden,
    )
    attention = 3 * d * d
    mlp = (2 * d) * h + h + h * z + z
    table = config.n_embeddings * z
    heads = (
        z * (r * f) + r * f            # proj_A_left
        + z * (f * dm) + f * dm        # proj_A_right
        + z * (dm * f) + dm * f        # proj_B_left
        + z * (f * r) + f * r          # proj_B_right
    )
    return attention + mlp + table + heads + encoder_params


def literal_param_count(net: Hypernet) -> int:
    """Direct scalar enumeration; the oracle for :func:`count_params`."""
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# Training: behavior cloning of the adapted toy LM on successful episodes


def train_hypernet(
    net: Hypernet,
    lm: ToyTransformer,
    episodes: Sequence[tuple[str, str]],
    doc_text: str,
    support_texts: Sequence[str],
    steps: int = 50,
    lr: float = 1e-3,
    seed: int = 42,
) -> list[float]:
    """Fit the hypernetwork so the adapted LM reproduces successful episodes.

    ``episodes`` are (query, canonical call text) pairs with reward 1.  The
    base LM is frozen; the cross-entropy of the adapted LM on the target
    tokens flows back through the generated adapters into every hypernetwork
    tensor.  Plain SGD with a fixed step size.  Returns the per-step losses.
    """
    if not episodes:
        raise EmptySupport("no successful episodes to train on")
    torch.manual_seed(seed)
    for p in lm.parameters():
        p.requires_grad_(False)
    v_doc = _tensor(embed_text(doc_text))
    v_support = _tensor(np.stack([embed_text(t) for t in support_texts]))
    optimizer = torch.optim.SGD(net.parameters(), lr=lr)
    scale = net.config.alpha / net.config.r
    vocab = lm.vocab
    losses: list[float] = []
    for step in range(steps):
        query, target = episodes[step % len(episodes)]
        prompt_ids = vocab.tokenize(query)
        target_ids = vocab.tokenize(target) + [vocab.eos_id]
        tokens = torch.tensor(prompt_ids + target_ids, dtype=torch.long)
        pairs = net(v_doc, v_support)
        lora = {key: (a, b, scale) for key, (a, b) in pairs.items()}
        logits = lm(tokens[:-1], lora=lora)
        targets = tokens[len(prompt_ids):]
        pred = logits[len(prompt_ids) - 1:]
        loss = nn.functional.cross_entropy(pred, targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------------------
# Checkpointing


def save_hypernet(net: Hypernet, path: str, seed: Optional[int] = None) -> None:
    params = {name: p.detach().numpy() for name, p in net.named_parameters()}
    meta = {"kind": "hypernet", "seed": seed, "config": vars(net.config) | {"modules": list(net.config.modules)}}
    save_checkpoint(params, path, meta)


def load_hypernet(path: str) -> Hypernet:
    params, meta = load_checkpoint(path)
    cfg_dict = dict(meta["config"])
    cfg_dict["modules"] = tuple(cfg_dict["modules"])
    net = Hypernet(HypernetConfig(**cfg_dict))
    state = {name: torch.as_tensor(arr) for name, arr in params.items()}
    net.load_state_dict(state)
    return net
