"""LM backends: byte vocabulary, n-gram reference model, toy transformer, decoding.

Every backend exposes the same small surface: ``vocab`` (tokenize /
detokenize), ``next_logits(context_ids)`` returning one logit vector over the
vocabulary, and optionally ``embed(text)`` returning a fixed 384-dim vector.
Two built-ins are self-contained (an add-one-smoothed byte n-gram model and a
small trainable transformer whose q/k/v projections accept LoRA deltas); a
third proxies a remote model over the bridge wire protocol.
"""

from __future__ import annotations

import base64
import json
import math
import socket
import zlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fsm import TokenDfa, mask_logits

EMBED_DIM = 384
DEFAULT_MAX_NEW_TOKENS = 64  # single-action generation budget


class EmptyCorpus(ValueError):
    """fit_ngram received an empty corpus."""


class InvalidToken(ValueError):
    """A context contains a token id outside the vocabulary."""


class DecodeDeadEnd(RuntimeError):
    """Constrained decoding reached a state with no legal continuation."""


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass(frozen=True)
class Vocabulary:
    """Dense id -> byte-string mapping with a dedicated EOS id."""

    tokens: tuple[bytes, ...]
    eos_id: int

    @property
    def size(self) -> int:
        return len(self.tokens)

    def items(self) -> Iterator[tuple[int, bytes]]:
        return enumerate(self.tokens)

    def tokenize(self, text: str | bytes) -> list[int]:
        """Greedy longest-match tokenization over the byte strings."""
        data = text.encode("utf-8", "surrogateescape") if isinstance(text, str) else text
        by_prefix = self._longest_first()
        out: list[int] = []
        pos = 0
        while pos < len(data):
            for token_id, piece in by_prefix:
                if piece and data.startswith(piece, pos):
                    out.append(token_id)
                    pos += len(piece)
                    break
            else:
                raise InvalidToken(f"byte {data[pos]!r} not coverable by vocabulary")
        return out

    def _longest_first(self) -> list[tuple[int, bytes]]:
        return sorted(
            ((i, t) for i, t in enumerate(self.tokens) if i != self.eos_id),
            key=lambda item: (-len(item[1]), item[0]),
        )

    def detokenize(self, ids: Sequence[int]) -> str:
        pieces = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise InvalidToken(f"token id {i} out of range")
            if i == self.eos_id:
                continue
            pieces.append(self.tokens[i])
        return b"".join(pieces).decode("utf-8", "surrogateescape")


def byte_vocabulary() -> Vocabulary:
    """256 single-byte tokens plus EOS (id 256); V = 257."""
    return Vocabulary(tokens=tuple(bytes([i]) for i in range(256)) + (b"",), eos_id=256)


# ---------------------------------------------------------------------------
# Embeddings: feature hashing of character trigrams into 384 dims


def embed_text(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Deterministic trigram-hash embedding, L2-normalized.

    Stands in for a pretrained sentence encoder at the same output width; the
    hash (crc32) is stable across processes so stores and grids reproduce.
    """
    padded = f"^{text}$"
    vec = np.zeros(dim, dtype=np.float64)
    for i in range(len(padded) - 2):
        tri = padded[i : i + 3].encode("utf-8", "surrogateescape")
        h = zlib.crc32(tri)
        idx = h % dim
        sign = 1.0 if (h >> 31) & 1 == 0 else -1.0
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        norm = 1.0
    return (vec / norm).astype(np.float32)


# ---------------------------------------------------------------------------
# Backend protocol


@runtime_checkable
class LmBackend(Protocol):
    vocab: Vocabulary

    def next_logits(self, context: Sequence[int]) -> np.ndarray: ...


def _check_context(vocab: Vocabulary, context: Sequence[int]) -> None:
    for t in context:
        if not 0 <= t < vocab.size:
            raise InvalidToken(f"token id {t} out of range")


# ---------------------------------------------------------------------------
# Byte n-gram backend


class NgramBackend:
    """Add-one-smoothed byte n-gram model; logits are log-probabilities."""

    def __init__(self, vocab: Vocabulary, order: int, counts: dict[tuple[int, ...], np.ndarray]):
        self.vocab = vocab
        self.order = order
        self._counts = counts

    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        _check_context(self.vocab, context)
        key = tuple(context[-(self.order - 1):]) if self.order > 1 else ()
        counts = self._counts.get(key)
        if counts is None:
            counts = np.zeros(self.vocab.size, dtype=np.float64)
        probs = (counts + 1.0) / (counts.sum() + self.vocab.size)
        return np.log(probs).astype(np.float32)

    def embed(self, text: str) -> np.ndarray:
        return embed_text(text)


def fit_ngram(corpus: str | bytes, order: int, vocab: Optional[Vocabulary] = None) -> NgramBackend:
    """Fit an order-``n`` byte model with add-one smoothing (n in 1..5)."""
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    if not 1 <= order <= 5:
        raise ValueError("order must be in [1, 5]")
    vocab = vocab or byte_vocabulary()
    ids = vocab.tokenize(corpus)
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for i, token in enumerate(ids):
        key = tuple(ids[max(0, i - (order - 1)): i]) if order > 1 else ()
        if order > 1 and len(key) < order - 1:
            continue
        row = counts.get(key)
        if row is None:
            row = counts.setdefault(key, np.zeros(vocab.size, dtype=np.float64))
        row[token] += 1.0
    return NgramBackend(vocab, order, counts)


# ---------------------------------------------------------------------------
# Toy transformer


class ToyTransformerLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_model = d_model
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.o_proj = nn.Linear(d_model, d_model, bias=False)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x: torch.Tensor, lora: Optional[dict] = None, layer_idx: int = 0) -> torch.Tensor:
        h = self.ln1(x)
        q = self._project(h, self.q_proj, lora, layer_idx, "q")
        k = self._project(h, self.k_proj, lora, layer_idx, "k")
        v = self._project(h, self.v_proj, lora, layer_idx, "v")
        *batch, seq, d = h.shape
        hd = d // self.n_heads
        shape = (*batch, seq, self.n_heads, hd)
        q = q.view(shape).transpose(-3, -2)
        k = k.view(shape).transpose(-3, -2)
        v = v.view(shape).transpose(-3, -2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), 1)
        scores = scores.masked_fill(causal, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(-3, -2).reshape(*batch, seq, d)
        x = x + self.o_proj(att)
        return x + self.mlp(self.ln2(x))

    @staticmethod
    def _project(
        h: torch.Tensor, linear: nn.Linear, lora: Optional[dict], layer_idx: int, module: str
    ) -> torch.Tensor:
        out = linear(h)
        if lora:
            pair = lora.get((layer_idx, module))
            if pair is not None:
                a, b, scale = pair
                out = out + scale * ((h @ a.T) @ b.T)
        return out


class ToyTransformer(nn.Module):
    """Small causal byte transformer; q/k/v projections accept LoRA deltas.

    Defaults (8 layers, d_model 64, 4 heads) are the smallest configuration
    where adapting the first 7 layers is meaningful.
    """

    def __init__(
        self,
        vocab: Optional[Vocabulary] = None,
        n_layers: int = 8,
        d_model: int = 64,
        n_heads: int = 4,
        max_context: int = 256,
        seed: int = 42,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.vocab = vocab or byte_vocabulary()
        self.d_model = d_model
        self.n_layers = n_layers
        self.max_context = max_context
        self.tok_emb = nn.Embedding(self.vocab.size, d_model)
        self.pos_emb = nn.Embedding(max_context, d_model)
        self.layers = nn.ModuleList(ToyTransformerLayer(d_model, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, self.vocab.size, bias=False)
        self.active_lora: Optional[dict] = None  # (layer, module) -> (A, B, scale)
        self.eval()

    def forward(self, tokens: torch.Tensor, lora: Optional[dict] = None) -> torch.Tensor:
        """Logits for every position; ``tokens`` is a 1-D (or batched 2-D) id tensor."""
        seq = tokens.shape[-1]
        pos = torch.arange(seq, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        for i, layer in enumerate(self.layers):
            x = layer(x, lora=lora, layer_idx=i)
        return self.head(self.ln_f(x))

    def set_lora(self, lora: Optional[dict]) -> None:
        """Install (or clear) the adapter deltas used by ``next_logits``."""
        self.active_lora = lora

    @torch.no_grad()
    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        _check_context(self.vocab, context)
        window = list(context[-self.max_context:])
        if not window:
            window = [self.vocab.eos_id]
        tokens = torch.tensor(window, dtype=torch.long)
        logits = self.forward(tokens, lora=self.active_lora)
        return logits[-1].numpy().astype(np.float32)

    @torch.no_grad()
    def next_logits_batch(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-token logits for several equal-length context windows at once."""
        windows = []
        for context in contexts:
            _check_context(self.vocab, context)
            window = list(context[-self.max_context:])
            windows.append(window or [self.vocab.eos_id])
        width = len(windows[0])
        if any(len(w) != width for w in windows):
            raise ValueError("batched contexts must share one window length")
        tokens = torch.tensor(windows, dtype=torch.long)
        logits = self.forward(tokens, lora=self.active_lora)
        return logits[:, -1].numpy().astype(np.float32)

    def embed(self, text: str) -> np.ndarray:
        return embed_text(text)


# ---------------------------------------------------------------------------
# Scripted backend (test/oracle use)


class ScriptedBackend:
    """Backend that forces a fixed continuation (uniform elsewhere).

    ``script`` maps a context suffix (the generated ids so far, as a tuple) to
    the id that must come next; unmapped contexts get uniform logits.
    """

    def __init__(self, vocab: Vocabulary, script: dict[tuple[int, ...], int], prompt_len: int = 0):
        self.vocab = vocab
        self.script = script
        self.prompt_len = prompt_len

    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        _check_context(self.vocab, context)
        generated = tuple(context[self.prompt_len:])
        logits = np.full(self.vocab.size, -10.0, dtype=np.float32)
        forced = self.script.get(generated)
        if forced is not None:
            logits[forced] = 0.0
        return logits

    def embed(self, text: str) -> np.ndarray:
        return embed_text(text)


def scripted_for_text(vocab: Vocabulary, prompt: str, completion: str) -> ScriptedBackend:
    """Backend that deterministically emits ``completion`` then EOS after ``prompt``."""
    prompt_ids = vocab.tokenize(prompt)
    completion_ids = vocab.tokenize(completion)
    script: dict[tuple[int, ...], int] = {}
    for i, token in enumerate(completion_ids):
        script[tuple(completion_ids[:i])] = token
    script[tuple(completion_ids)] = vocab.eos_id
    return ScriptedBackend(vocab, script, prompt_len=len(prompt_ids))


# ---------------------------------------------------------------------------
# Bridge client backend


class BridgeBackend:
    """Client for a remote backend speaking the newline-delimited JSON protocol."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        self._next_id = 0
        info = self.request("info", {})
        self.vocab_size = int(info["vocab_size"])
        self.eos_id = int(info["eos_id"])
        self.embed_dim = int(info["embed_dim"])
        self.context_limit = int(info["context"])
        self.vocab = _RemoteVocabulary(self)

    def request(self, op: str, payload: dict) -> dict:
        self._next_id += 1
        msg = {"id": self._next_id, "op": op, "version": 1, **payload}
        self._file.write(json.dumps(msg).encode() + b"\n")
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise ConnectionError("bridge closed the connection")
        resp = json.loads(line)
        if resp.get("id") != self._next_id:
            raise ConnectionError("bridge response id mismatch")
        if "error" in resp:
            raise RuntimeError(f"bridge error: {resp['error']}")
        return resp

    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        resp = self.request("logits", {"context": list(context)})
        raw = base64.b64decode(resp["logits_b64"])
        logits = np.frombuffer(raw, dtype="<f4")
        if logits.shape[0] != self.vocab_size:
            raise ConnectionError("bridge logits length != advertised vocab size")
        return logits.copy()

    def embed(self, text: str) -> np.ndarray:
        resp = self.request("embed", {"text": text})
        raw = base64.b64decode(resp["embedding_b64"])
        return np.frombuffer(raw, dtype="<f4").copy()

    def close(self) -> None:
        self._file.close()
        self._sock.close()


class _RemoteVocabulary:
    """Tokenize/detokenize through the bridge; quacks like Vocabulary for decoding."""

    def __init__(self, client: BridgeBackend):
        self._client = client

    @property
    def size(self) -> int:
        return self._client.vocab_size

    @property
    def eos_id(self) -> int:
        return self._client.eos_id

    def tokenize(self, text: str) -> list[int]:
        return list(self._client.request("tokenize", {"text": text})["ids"])

    def detokenize(self, ids: Sequence[int]) -> str:
        return self._client.request("detokenize", {"ids": list(ids)})["text"]


# ---------------------------------------------------------------------------
# Decoding


def next_logits(backend: LmBackend, context: Sequence[int]) -> np.ndarray:
    """Free-function form of the backend method (mirrors the module surface)."""
    return backend.next_logits(context)


def greedy_decode(
    backend: LmBackend,
    prompt: str,
    max_new: int = DEFAULT_MAX_NEW_TOKENS,
    dfa: Optional[TokenDfa] = None,
) -> str:
    """Greedy (argmax) decoding, optionally constrained by a token DFA.

    Sampling is disabled and temperature is effectively 1.0 throughout the
    harness.  With a DFA, the return value detokenizes to a string of the
    pattern's language or :class:`DecodeDeadEnd` is raised.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    vocab = backend.vocab
    context = vocab.tokenize(prompt)
    generated: list[int] = []
    state = dfa.start if dfa is not None else None
    for _ in range(max_new):
        logits = backend.next_logits(context)
        if dfa is not None:
            logits = mask_logits(logits, dfa.mask(state))
            if not np.isfinite(logits).any():
                raise DecodeDeadEnd("no legal token available")
        token = int(np.argmax(logits))
        if not np.isfinite(logits[token]):
            raise DecodeDeadEnd("all tokens masked")
        if token == vocab.eos_id:
            return vocab.detokenize(generated)
        generated.append(token)
        context.append(token)
        if dfa is not None:
            state = dfa.step(state, token)
            if state is None:  # unreachable when masking is on
                raise DecodeDeadEnd("token left the automaton")
    if dfa is not None and state not in dfa.accepting:
        raise DecodeDeadEnd("token budget exhausted before an accepting state")
    return vocab.detokenize(generated)
