"""Success-probability value function: replay buffer, target network, TD(0).

The net maps a state feature vector to a probability in (0, 1) via a sigmoid
head.  Training minimizes the squared one-step temporal-difference error

    (r + gamma * V_target(s') - V(s))^2

with the bootstrap term detached (a hard-synced target network stabilizes
the regression).  Terminal transitions regress directly onto the reward.
"""

from __future__ import annotations

import copy
import random
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .lm import EMBED_DIM, embed_text


class DimensionMismatch(ValueError):
    """State feature width disagrees with the network."""


class EmptyBatch(ValueError):
    """td_update received an empty batch."""


DEFAULT_GAMMA = 0.99
DEFAULT_SYNC_EVERY = 100

#: concat(embed(query), embed(partial canonical call), step fraction)
FEATURE_DIM = 2 * EMBED_DIM + 1


def state_features(query: str, partial_call: str, step: int, max_steps: int) -> np.ndarray:
    """Feature vector for a decoding state, built from capabilities the LM layer
    already provides (text embeddings) plus the step budget fraction."""
    frac = np.array([step / max(1, max_steps)], dtype=np.float32)
    return np.concatenate([embed_text(query), embed_text(partial_call), frac])


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool

    def __post_init__(self) -> None:
        if np.asarray(self.s).shape != np.asarray(self.s_next).shape:
            raise DimensionMismatch("s and s_next have different widths")


class ReplayBuffer:
    """FIFO ring of transitions; never exceeds capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def add(self, transition: Transition) -> None:
        self._items.append(transition)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def sample(self, batch_size: int, rng: random.Random) -> list[Transition]:
        if not self._items:
            raise EmptyBatch("buffer is empty")
        items = list(self._items)
        return [items[rng.randrange(len(items))] for _ in range(batch_size)]


class ValueNet(nn.Module):
    """Sigmoid-headed MLP with a hard-synced target copy."""

    def __init__(self, in_dim: int = FEATURE_DIM, hidden: int = 64, gamma: float = DEFAULT_GAMMA, seed: int = 42):
        super().__init__()
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        torch.manual_seed(seed)
        self.in_dim = in_dim
        self.gamma = gamma
        self.body = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.target_body = copy.deepcopy(self.body)
        for p in self.target_body.parameters():
            p.requires_grad_(False)
        self.updates = 0

    def forward(self, s: torch.Tensor, target: bool = False) -> torch.Tensor:
        body = self.target_body if target else self.body
        return torch.sigmoid(body(s)).squeeze(-1)

    def _features(self, s: np.ndarray) -> torch.Tensor:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"feature width {s.shape[-1]} != {self.in_dim}")
        return torch.as_tensor(s, dtype=torch.get_default_dtype())


def predict(net: ValueNet, s: np.ndarray, target: bool = False) -> float:
    """Success probability of state ``s``; always inside the open unit interval."""
    with torch.no_grad():
        return float(net(net._features(s), target=target))


def td_loss(net: ValueNet, batch: Sequence[Transition]) -> torch.Tensor:
    """Mean squared one-step TD error (bootstrap term detached)."""
    if not batch:
        raise EmptyBatch("batch is empty")
    s = net._features(np.stack([t.s for t in batch]))
    s_next = net._features(np.stack([t.s_next for t in batch]))
    r = torch.as_tensor([t.r for t in batch], dtype=torch.get_default_dtype())
    nonterminal = torch.as_tensor(
        [0.0 if t.terminal else 1.0 for t in batch], dtype=torch.get_default_dtype()
    )
    with torch.no_grad():
        bootstrap = net(s_next, target=True)
    target = r + net.gamma * nonterminal * bootstrap
    return torch.mean((target - net(s)) ** 2)


def td_update(net: ValueNet, batch: Sequence[Transition], step_size: float = 1e-2) -> float:
    """One SGD step on the TD loss; returns the pre-update loss."""
    loss = td_loss(net, batch)
    net.body.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        for p in net.body.parameters():
            if p.grad is not None:
                p -= step_size * p.grad
    net.updates += 1
    return float(loss.detach())


def sync_target(net: ValueNet) -> None:
    """Hard copy of the online weights into the target network."""
    net.target_body.load_state_dict(net.body.state_dict())


def train_value(
    net: ValueNet,
    buffer: ReplayBuffer,
    steps: int,
    batch_size: int = 32,
    step_size: float = 1e-2,
    sync_every: int = DEFAULT_SYNC_EVERY,
    seed: int = 42,
) -> list[float]:
    """Standard loop: sample, td_update, hard-sync the target every ``sync_every``."""
    rng = random.Random(seed)
    losses = []
    for _ in range(steps):
        batch = buffer.sample(batch_size, rng)
        losses.append(td_update(net, batch, step_size))
        if net.updates % sync_every == 0:
            sync_target(net)
    return losses


def save_value_net(net: ValueNet, path: str, seed: Optional[int] = None) -> None:
    params = {name: p.detach().numpy() for name, p in net.named_parameters()}
    meta = {
        "kind": "value", "seed": seed, "in_dim": net.in_dim, "gamma": net.gamma,
        "hidden": net.body[0].out_features,
    }
    save_checkpoint(params, path, meta)


def load_value_net(path: str) -> ValueNet:
    params, meta = load_checkpoint(path)
    net = ValueNet(in_dim=meta["in_dim"], hidden=meta["hidden"], gamma=meta["gamma"])
    net.load_state_dict({name: torch.as_tensor(arr) for name, arr in params.items()})
    return net
