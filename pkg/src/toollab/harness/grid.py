"""The full ablation grid: shots x docs x adapter x noise over four task families.

The default grid crosses 6 shot counts (0-5), docs on/off, hypernetwork
adapter on/off, and 0-2 corrupted examples: 72 cells, each run over the four
bundled 50-task suites (200 tasks per cell).  Decoding is greedy; API-family
tasks with a ``schema_ref`` decode under the schema-compiled token automaton,
so their outputs can never be malformed.

Reports are content-hashed over outcome data only (never timings), so two
runs with the same seed produce the same hash.

Performance note: the toy transformer reads a fixed-width trailing context
window, which makes a greedy decode a pure function of (adapter state,
automaton, last-window prompt bytes).  The runner memoizes decodes on exactly
that key and batches cache misses, which is observationally identical to
decoding every cell independently.  Per-task latency is reported as the
amortized compute cost of the decode that produced the output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..fsm import TokenDfa, build_token_dfa, compile_schema, mask_logits
from ..hypernet import (
    ContextVectors,
    Hypernet,
    HypernetConfig,
    generate_all,
    lora_state_for_lm,
)
from ..lm import (
    DEFAULT_MAX_NEW_TOKENS,
    LmBackend,
    NgramBackend,
    ToyTransformer,
    byte_vocabulary,
    embed_text,
    fit_ngram,
)
from ..prompts import DEFAULT_EXAMPLES, NoiseSpec, PromptSpec, TEMPLATES, apply_noise, build
from .checkers import categorize
from .records import Category, FAMILIES, Outcome, TaskRecord, bundled_suite, load_bundled_schema
from .sql import fixture_db

DEFAULT_SHOT_LEVELS = (0, 1, 2, 3, 4, 5)
DEFAULT_NOISE_LEVELS = (0, 1, 2)
GRID_MAX_CONTEXT = 128  # toy-transformer window; keeps a full grid in CPU budget
GRID_MAX_NEW_TOKENS = 96  # byte-level budget: longest schema call is 72 bytes + EOS


@dataclass(frozen=True)
class GridCell:
    shots: int
    use_docs: bool
    hypernet_on: bool
    noise: int

    def key(self) -> str:
        return f"shots={self.shots},docs={int(self.use_docs)},hyper={int(self.hypernet_on)},noise={self.noise}"


def default_grid(
    shot_levels: Sequence[int] = DEFAULT_SHOT_LEVELS,
    noise_levels: Sequence[int] = DEFAULT_NOISE_LEVELS,
) -> tuple[GridCell, ...]:
    return tuple(
        GridCell(shots=s, use_docs=d, hypernet_on=h, noise=n)
        for s in shot_levels
        for d in (True, False)
        for h in (True, False)
        for n in noise_levels
    )


def _cell_task_seed(seed: int, cell: GridCell, task_id: str) -> int:
    digest = hashlib.sha256(f"{seed}|{cell.key()}|{task_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def cell_examples(
    family: str, cell: GridCell, seed: int, task_id: str
) -> tuple[tuple[str, str], ...]:
    """The few-shot examples a cell renders for one task, noise applied.

    Corruption count is clamped to the number of rendered shots (a 0-shot
    cell has nothing to corrupt).
    """
    examples = DEFAULT_EXAMPLES[family][: cell.shots]
    n_corrupt = min(cell.noise, len(examples))
    if n_corrupt:
        rng = random.Random(_cell_task_seed(seed, cell, task_id))
        examples = apply_noise(family, examples, NoiseSpec(n_corrupt=n_corrupt), rng)
    return tuple(examples)


def cell_prompt(family: str, cell: GridCell, seed: int, task: TaskRecord) -> str:
    examples = cell_examples(family, cell, seed, task.id)
    spec = PromptSpec(
        family=family,
        query=task.query,
        examples=examples,
        shots=len(examples),
        use_docs=cell.use_docs,
    )
    return build(spec)


# ---------------------------------------------------------------------------
# Batched constrained greedy decoding


def _batched_greedy(
    backend: LmBackend,
    windows: list[list[int]],
    dfas: list[Optional[TokenDfa]],
    eos_id: int,
    max_new: int,
    max_context: int,
) -> list[list[int]]:
    """Greedy-decode every window; returns generated ids (without EOS).

    Ties in the argmax resolve to the lowest token id.  A constrained item
    whose automaton state permits nothing ends immediately with its partial
    output.
    """
    n = len(windows)
    contexts = [list(w) for w in windows]
    out: list[list[int]] = [[] for _ in range(n)]
    states: list[Optional[int]] = [dfa.start if dfa is not None else None for dfa in dfas]
    done = [False] * n
    batch_fn = getattr(backend, "next_logits_batch", None)
    for _ in range(max_new):
        active = [i for i in range(n) if not done[i]]
        if not active:
            break
        trimmed = [contexts[i][-max_context:] for i in active]
        if batch_fn is not None and len(active) > 1:
            logit_rows = batch_fn(trimmed)
        else:
            logit_rows = [backend.next_logits(ctx) for ctx in trimmed]
        for row, i in zip(logit_rows, active):
            dfa = dfas[i]
            if dfa is not None:
                mask = dfa.mask(states[i])
                if mask.n_allowed == 0:
                    done[i] = True
                    continue
                row = mask_logits(row, mask)
            token = int(np.argmax(row))
            if token == eos_id:
                done[i] = True
                continue
            out[i].append(token)
            contexts[i].append(token)
            if dfa is not None:
                states[i] = dfa.step(states[i], token)
    return out


# ---------------------------------------------------------------------------
# Results


@dataclass(frozen=True)
class CellResult:
    cell: GridCell
    outcomes: dict[str, tuple[Outcome, ...]]  # family -> outcomes
    applicable: bool = True  # False: adapter requested on a backend without one

    def success_rate(self, family: Optional[str] = None) -> float:
        pool = [
            o
            for fam, outs in self.outcomes.items()
            if family is None or fam == family
            for o in outs
        ]
        return sum(o.success for o in pool) / len(pool) if pool else float("nan")


@dataclass
class GridReport:
    seed: int
    backend_name: str
    families: tuple[str, ...]
    n_tasks_per_family: int
    max_new_tokens: int
    cells: tuple[CellResult, ...]
    adaptation_ms: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0

    # -- hashing ----------------------------------------------------------
    def _hash_payload(self) -> dict:
        """Outcome-only payload: no latencies, no adaptation or wall times."""
        return {
            "seed": self.seed,
            "backend": self.backend_name,
            "families": list(self.families),
            "n_tasks_per_family": self.n_tasks_per_family,
            "max_new_tokens": self.max_new_tokens,
            "cells": [
                {
                    "cell": result.cell.key(),
                    "applicable": result.applicable,
                    "outcomes": {
                        family: [
                            [o.task_id, o.raw_output, o.success, o.category.value]
                            for o in outs
                        ]
                        for family, outs in sorted(result.outcomes.items())
                    },
                }
                for result in self.cells
            ],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self._hash_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- aggregation ------------------------------------------------------
    def _select(
        self,
        family: Optional[str] = None,
        shots: Optional[int] = None,
        use_docs: Optional[bool] = None,
        hypernet_on: Optional[bool] = None,
        noise: Optional[int] = None,
    ) -> list[Outcome]:
        picked: list[Outcome] = []
        for result in self.cells:
            if not result.applicable:
                continue
            c = result.cell
            if shots is not None and c.shots != shots:
                continue
            if use_docs is not None and c.use_docs != use_docs:
                continue
            if hypernet_on is not None and c.hypernet_on != hypernet_on:
                continue
            if noise is not None and c.noise != noise:
                continue
            for fam, outs in result.outcomes.items():
                if family is None or fam == family:
                    picked.extend(outs)
        return picked

    def success_rate(self, **filters) -> float:
        pool = self._select(**filters)
        return sum(o.success for o in pool) / len(pool) if pool else float("nan")

    def hypernet_delta(self, family: str) -> float:
        """SR(adapter on) - SR(adapter off) for one family, other dims pooled."""
        return self.success_rate(family=family, hypernet_on=True) - self.success_rate(
            family=family, hypernet_on=False
        )

    # -- tables -----------------------------------------------------------
    def table_main(self) -> dict[str, dict[str, float]]:
        """Per family: SR with the adapter off, on, and the on-off delta."""
        table = {}
        for family in self.families:
            off = self.success_rate(family=family, hypernet_on=False)
            on = self.success_rate(family=family, hypernet_on=True)
            table[family] = {"adapter_off": off, "adapter_on": on, "delta": on - off}
        return table

    def table_shot_sweep(self) -> dict[int, dict[str, float]]:
        """SR per shot count (docs on, no noise, adapter off)."""
        shot_levels = sorted({r.cell.shots for r in self.cells})
        return {
            s: {
                family: self.success_rate(
                    family=family, shots=s, use_docs=True, hypernet_on=False, noise=0
                )
                for family in self.families
            }
            for s in shot_levels
        }

    def table_docs(self) -> dict[str, dict[str, float]]:
        """SR with documentation present vs absent (no noise, adapter off)."""
        return {
            label: {
                family: self.success_rate(
                    family=family, use_docs=flag, hypernet_on=False, noise=0
                )
                for family in self.families
            }
            for label, flag in (("docs_on", True), ("docs_off", False))
        }

    def table_noise(self) -> dict[int, dict[str, float]]:
        """SR per corruption level (docs on, adapter off)."""
        noise_levels = sorted({r.cell.noise for r in self.cells})
        return {
            n: {
                family: self.success_rate(
                    family=family, noise=n, use_docs=True, hypernet_on=False
                )
                for family in self.families
            }
            for n in noise_levels
        }

    def table_errors(self) -> dict[str, dict[str, int]]:
        """Error-category counts per family over every applicable cell."""
        table: dict[str, dict[str, int]] = {}
        for family in self.families:
            pool = self._select(family=family)
            counts = {"success": 0, "semantic": 0, "format": 0, "empty": 0}
            for o in pool:
                counts["success" if o.success else o.category.value] += 1
            table[family] = counts
        return table


# ---------------------------------------------------------------------------
# The runner


def _default_ngram_backend() -> NgramBackend:
    lines = []
    for family in FAMILIES:
        lines.append(TEMPLATES[family].doc_body)
        lines.extend(o for _q, o in DEFAULT_EXAMPLES[family])
    return fit_ngram("\n".join(lines), order=3)


def _task_dfa_cache(suites: dict[str, list[TaskRecord]]) -> dict[str, TokenDfa]:
    """Token automata for every schema referenced by the API suite."""
    vocab = byte_vocabulary()
    cache: dict[str, TokenDfa] = {}
    for task in suites.get("api", ()):
        if task.schema_ref and task.schema_ref not in cache:
            schema = load_bundled_schema(task.schema_ref)
            cache[task.schema_ref] = build_token_dfa(compile_schema(schema), vocab)
    return cache


def _family_adapter(net: Hypernet, family: str) -> dict:
    context = ContextVectors(
        v_doc=embed_text(TEMPLATES[family].doc_body),
        v_support=[embed_text(output) for _q, output in DEFAULT_EXAMPLES[family]],
    )
    return lora_state_for_lm(generate_all(net, context), net.config)


def run_grid(
    seed: int = 42,
    families: Sequence[str] = FAMILIES,
    cells: Optional[Sequence[GridCell]] = None,
    backend: str | LmBackend = "toy",
    hypernet: Optional[Hypernet] = None,
    tasks_per_family: Optional[int] = None,
    max_new_tokens: int = GRID_MAX_NEW_TOKENS,
    progress: bool = False,
) -> GridReport:
    """Run every cell of the grid and return the full report.

    ``backend`` is ``"toy"`` (default; a fixed-seed byte transformer with a
    128-token window), ``"ngram"``, or any :class:`~toollab.lm.LmBackend`.
    Adapter-on cells need a backend with ``set_lora``; on backends without
    one they are marked not applicable and carry no outcomes.
    """
    t0 = time.perf_counter()
    grid = tuple(cells) if cells is not None else default_grid()
    backend_name = backend if isinstance(backend, str) else type(backend).__name__
    if backend == "toy":
        backend = ToyTransformer(max_context=GRID_MAX_CONTEXT, seed=seed)
    elif backend == "ngram":
        backend = _default_ngram_backend()
    elif isinstance(backend, str):
        raise ValueError(f"unknown backend {backend!r}")

    vocab = backend.vocab
    eos_id = vocab.eos_id
    max_context = getattr(backend, "max_context", GRID_MAX_CONTEXT)
    supports_adapter = hasattr(backend, "set_lora")
    needs_adapter = any(c.hypernet_on for c in grid)

    suites = {fam: bundled_suite(fam) for fam in families}
    if tasks_per_family is not None:
        suites = {fam: tasks[:tasks_per_family] for fam, tasks in suites.items()}
    n_tasks = max(len(tasks) for tasks in suites.values()) if suites else 0
    dfas = _task_dfa_cache(suites)
    db = fixture_db()

    adapters: dict[str, dict] = {}
    adaptation_ms: dict[str, float] = {}
    if needs_adapter and supports_adapter:
        net = hypernet or Hypernet(
            HypernetConfig(d_model=backend.d_model, n_layers=min(7, backend.n_layers)),
            seed=seed,
        )
        for family in families:
            t_adapt = time.perf_counter()
            adapters[family] = _family_adapter(net, family)
            adaptation_ms[family] = (time.perf_counter() - t_adapt) * 1e3

    # decode memo: (hypernet_on, family, schema_ref, window bytes) -> (text, s)
    memo: dict[tuple, tuple[str, float]] = {}

    results: list[CellResult] = []
    for cell in grid:
        if cell.hypernet_on and not supports_adapter:
            results.append(CellResult(cell=cell, outcomes={}, applicable=False))
            continue
        outcomes: dict[str, tuple[Outcome, ...]] = {}
        for family in families:
            tasks = suites[family]
            keys = []
            for task in tasks:
                prompt = cell_prompt(family, cell, seed, task)
                window = tuple(vocab.tokenize(prompt)[-max_context:])
                keys.append((cell.hypernet_on, family, task.schema_ref, window))
            # batch-decode the cache misses under the right adapter state
            miss_idx = [i for i, k in enumerate(keys) if k not in memo]
            if miss_idx:
                if supports_adapter:
                    backend.set_lora(adapters[family] if cell.hypernet_on else None)
                t_batch = time.perf_counter()
                generated = _batched_greedy(
                    backend,
                    windows=[list(keys[i][3]) for i in miss_idx],
                    dfas=[
                        dfas.get(tasks[i].schema_ref) if tasks[i].schema_ref else None
                        for i in miss_idx
                    ],
                    eos_id=eos_id,
                    max_new=max_new_tokens,
                    max_context=max_context,
                )
                per_item_s = (time.perf_counter() - t_batch) / len(miss_idx)
                for i, ids in zip(miss_idx, generated):
                    memo[keys[i]] = (vocab.detokenize(ids), per_item_s)
            cell_outcomes = []
            for task, key in zip(tasks, keys):
                raw, latency_s = memo[key]
                category = categorize(family, raw, task.gold, db)
                cell_outcomes.append(
                    Outcome(
                        task_id=task.id,
                        raw_output=raw,
                        success=category is Category.NONE,
                        category=category,
                        latency_ms=latency_s * 1e3,
                        pass_at_1=category is Category.NONE,
                    )
                )
            outcomes[family] = tuple(cell_outcomes)
        results.append(CellResult(cell=cell, outcomes=outcomes))
        if progress:
            done = len(results)
            print(f"[grid] {done}/{len(grid)} cells, {time.perf_counter() - t0:.1f}s", flush=True)

    return GridReport(
        seed=seed,
        backend_name=backend_name,
        families=tuple(families),
        n_tasks_per_family=n_tasks,
        max_new_tokens=max_new_tokens,
        cells=tuple(results),
        adaptation_ms=adaptation_ms,
        wall_time_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Report emission


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines)


def _fmt(x: float) -> str:
    return "n/a" if x != x else f"{x:.3f}"


def emit_report(report: GridReport, out_dir: str | Path) -> Path:
    """Write ``report.md`` (tables) and ``cells.csv`` (raw per-cell rows)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    families = list(report.families)
    sections = [
        "# Ablation grid report",
        "",
        f"- backend: `{report.backend_name}`",
        f"- seed: {report.seed}",
        f"- tasks per family: {report.n_tasks_per_family}",
        f"- cells: {len(report.cells)}",
        f"- wall time: {report.wall_time_s:.1f}s",
        f"- content hash: `{report.content_hash()}`",
        "",
        "## Success rate by family and adapter state",
        "",
        _markdown_table(
            ["family", "adapter off", "adapter on", "delta"],
            [
                [fam, _fmt(row["adapter_off"]), _fmt(row["adapter_on"]), _fmt(row["delta"])]
                for fam, row in report.table_main().items()
            ],
        ),
        "",
        "## Success rate by shot count (docs on, no noise, adapter off)",
        "",
        _markdown_table(
            ["shots"] + families,
            [
                [str(s)] + [_fmt(row[fam]) for fam in families]
                for s, row in report.table_shot_sweep().items()
            ],
        ),
        "",
        "## Success rate with and without documentation (no noise, adapter off)",
        "",
        _markdown_table(
            ["condition"] + families,
            [
                [label] + [_fmt(row[fam]) for fam in families]
                for label, row in report.table_docs().items()
            ],
        ),
        "",
        "## Success rate by example-corruption level (docs on, adapter off)",
        "",
        _markdown_table(
            ["corrupted examples"] + families,
            [
                [str(n)] + [_fmt(row[fam]) for fam in families]
                for n, row in report.table_noise().items()
            ],
        ),
        "",
        "## Error categories (all applicable cells)",
        "",
        _markdown_table(
            ["family", "success", "semantic", "format", "empty"],
            [
                [fam] + [str(row[k]) for k in ("success", "semantic", "format", "empty")]
                for fam, row in report.table_errors().items()
            ],
        ),
        "",
    ]
    if report.adaptation_ms:
        sections += [
            "## Adapter generation time",
            "",
            _markdown_table(
                ["family", "adaptation (ms)"],
                [[fam, f"{ms:.1f}"] for fam, ms in report.adaptation_ms.items()],
            ),
            "",
        ]
    report_path = out / "report.md"
    report_path.write_text("\n".join(sections))

    with open(out / "cells.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["shots", "use_docs", "hypernet_on", "noise", "family", "applicable",
             "n", "success_rate", "semantic", "format", "empty", "mean_latency_ms"]
        )
        for result in report.cells:
            c = result.cell
            if not result.applicable:
                writer.writerow([c.shots, c.use_docs, c.hypernet_on, c.noise, "", False,
                                 0, "", "", "", "", ""])
                continue
            for family, outs in result.outcomes.items():
                counts = {"semantic": 0, "format": 0, "empty": 0}
                for o in outs:
                    if not o.success:
                        counts[o.category.value] += 1
                sr = sum(o.success for o in outs) / len(outs) if outs else float("nan")
                mean_lat = sum(o.latency_ms for o in outs) / len(outs) if outs else 0.0
                writer.writerow(
                    [c.shots, c.use_docs, c.hypernet_on, c.noise, family, True,
                     len(outs), f"{sr:.4f}", counts["semantic"], counts["format"],
                     counts["empty"], f"{mean_lat:.2f}"]
                )
    return report_path
