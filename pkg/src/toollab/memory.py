"""Episodic retrieval memory: exact cosine nearest-neighbor search.

Entries pair a fixed-width embedding with an arbitrary JSON-serializable
payload.  Search is an exact brute-force cosine scan -- at desk scale an
approximate index buys nothing -- with ties broken by insertion order.
Stores persist as JSONL, one embedding + payload per line.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class DimensionMismatch(ValueError):
    """Embedding width differs from the store's."""


class EmptyStore(LookupError):
    """knn queried an empty store."""


class MemoryStore:
    def __init__(self, dim: int = 384):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self._embeddings: list[np.ndarray] = []
        self._payloads: list[Any] = []

    def __len__(self) -> int:
        return len(self._payloads)

    def add(self, embedding: Sequence[float], payload: Any) -> None:
        vec = np.asarray(embedding, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"embedding shape {vec.shape} != ({self.dim},)")
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise ValueError("zero embedding: cosine similarity undefined")
        self._embeddings.append(vec)
        self._payloads.append(payload)

    def knn(self, query: Sequence[float], k: int) -> list[Any]:
        """Top-k payloads by cosine similarity (exact; all entries if k > count)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self._payloads:
            raise EmptyStore("store is empty")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query shape {q.shape} != ({self.dim},)")
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise ValueError("zero query: cosine similarity undefined")
        matrix = np.stack(self._embeddings)
        sims = matrix @ q / (np.linalg.norm(matrix, axis=1) * qn)
        # Stable sort on -similarity keeps insertion order among ties.
        order = np.argsort(-sims, kind="stable")[:k]
        return [self._payloads[i] for i in order]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for vec, payload in zip(self._embeddings, self._payloads):
                fh.write(json.dumps({"embedding": vec.tolist(), "payload": payload}) + "\n")

    @classmethod
    def load(cls, path: str | Path, dim: int = 384) -> "MemoryStore":
        store = cls(dim=dim)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    record = json.loads(line)
                    store.add(record["embedding"], record["payload"])
        return store
