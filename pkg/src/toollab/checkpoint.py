"""Flat binary tensor archive with a JSON manifest.

One ``.bin`` file holds all tensors concatenated little-endian; the sibling
``.json`` manifest records names, shapes, dtypes, byte offsets, and arbitrary
metadata (seed, config).  Shared by the hypernetwork and value-net trainers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_checkpoint(params: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    path = Path(path)
    manifest: dict = {"meta": meta or {}, "tensors": []}
    offset = 0
    with open(path, "wb") as fh:
        for name in sorted(params):
            # np.asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(params[name])
            data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            manifest["tensors"].append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": arr.dtype.name,
                    "offset": offset,
                    "nbytes": len(data),
                }
            )
            fh.write(data)
            offset += len(data)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    blob = path.read_bytes()
    params: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(
            blob, dtype=np.dtype(entry["dtype"]).newbyteorder("<"),
            count=int(np.prod(entry["shape"], initial=1)), offset=entry["offset"],
        )
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return params, manifest["meta"]
