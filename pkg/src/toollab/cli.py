"""Command-line interface.

Subcommands:

- ``compile-schema``: schema JSON -> canonical-call regex (and optional DOT).
- ``generate``: constrained greedy generation for one query.
- ``hypernet-gen``: generate LoRA adapters from docs + support examples.
- ``train-value``: fit the TD(0) value net on logged episodes.
- ``run-grid``: the full ablation grid, with a markdown/CSV report.

Every subcommand accepts ``--config FILE`` (TOML); command-line flags
override config values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent
    import tomli as tomllib


def _load_config(path: str | None, section: str) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return data.get(section, {})


def _merged(args: argparse.Namespace, section: str, keys: dict[str, object]) -> dict:
    """Config-file values overridden by explicitly set CLI flags."""
    merged = dict(keys)
    merged.update(_load_config(args.config, section))
    for key in keys:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            merged[key] = value
    return merged


def _cmd_compile_schema(args: argparse.Namespace) -> int:
    from . import fsm
    from .schema import ToolSchema

    schema = ToolSchema.from_json_dict(json.loads(Path(args.schema).read_text()))
    pattern = fsm.compile_schema(schema)
    char_dfa = fsm.build_char_dfa(pattern)
    print(pattern.regex_text)
    print(f"# states: {char_dfa.n_states}", file=sys.stderr)
    if args.dot:
        from .lm import byte_vocabulary

        token_dfa = fsm.build_token_dfa(pattern, byte_vocabulary())
        Path(args.dot).write_text(token_dfa.to_dot())
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    from . import fsm
    from .lm import ToyTransformer, byte_vocabulary, fit_ngram, greedy_decode
    from .prompts import PromptSpec, DEFAULT_EXAMPLES, build
    from .schema import ToolSchema

    cfg = _merged(args, "generate", {"backend": "toy", "shots": 3, "family": "api", "max-new": 64})
    vocab = byte_vocabulary()
    schema = ToolSchema.from_json_dict(json.loads(Path(args.schema).read_text()))
    dfa = fsm.build_token_dfa(fsm.compile_schema(schema), vocab)

    family = cfg["family"]
    prompt = build(
        PromptSpec(
            family=family,
            query=args.query,
            examples=DEFAULT_EXAMPLES[family][: int(cfg["shots"])],
            shots=int(cfg["shots"]),
            use_docs=not args.no_docs,
        )
    )
    if cfg["backend"] == "ngram":
        corpus = "\n".join(o for _q, o in DEFAULT_EXAMPLES[family])
        backend = fit_ngram(corpus, order=3)
    else:
        backend = ToyTransformer(max_context=128, seed=args.seed)
    print(greedy_decode(backend, prompt, max_new=int(cfg["max-new"]), dfa=dfa))
    return 0


def _cmd_hypernet_gen(args: argparse.Namespace) -> int:
    import numpy as np

    from .checkpoint import save_checkpoint
    from .hypernet import ContextVectors, Hypernet, HypernetConfig, generate_all
    from .lm import embed_text

    cfg = _merged(
        args, "hypernet",
        {"d-model": 64, "r": 16, "alpha": 32.0, "factor": 64, "n-layers": 7},
    )
    doc_text = Path(args.docs).read_text()
    support_texts = [
        line for line in Path(args.support).read_text().splitlines() if line.strip()
    ]
    net = Hypernet(
        HypernetConfig(
            d_model=int(cfg["d-model"]),
            r=int(cfg["r"]),
            alpha=float(cfg["alpha"]),
            factor=int(cfg["factor"]),
            n_layers=int(cfg["n-layers"]),
        ),
        seed=args.seed,
    )
    context = ContextVectors(
        v_doc=embed_text(doc_text),
        v_support=[embed_text(t) for t in support_texts],
    )
    pairs = generate_all(net, context)
    params = {}
    for (layer, module), pair in pairs.items():
        params[f"lora.{layer}.{module}.A"] = pair.A
        params[f"lora.{layer}.{module}.B"] = pair.B
    save_checkpoint(
        params,
        args.out,
        meta={
            "kind": "lora-set",
            "seed": args.seed,
            "alpha": float(cfg["alpha"]),
            "r": int(cfg["r"]),
            "n_pairs": len(pairs),
        },
    )
    total = int(sum(np.asarray(v).size for v in params.values()))
    print(f"wrote {len(pairs)} adapter pairs ({total} scalars) to {args.out}")
    return 0


def _cmd_train_value(args: argparse.Namespace) -> int:
    from .value import (
        ReplayBuffer,
        Transition,
        ValueNet,
        save_value_net,
        state_features,
        train_value,
    )

    cfg = _merged(
        args, "value",
        {"steps": 500, "batch-size": 32, "step-size": 1e-2, "gamma": 0.99,
         "hidden": 64, "sync-every": 100, "max-steps": 64},
    )
    max_steps = int(cfg["max-steps"])
    buffer = ReplayBuffer(capacity=100_000)
    with open(args.episodes) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            query, call, reward = rec["query"], rec["call"], float(rec["reward"])
            # One transition per prefix step; the final step carries the reward.
            steps = min(max_steps, max(1, len(call)))
            for step in range(steps):
                terminal = step == steps - 1
                buffer.add(
                    Transition(
                        s=state_features(query, call[:step], step, max_steps),
                        a=0,
                        r=reward if terminal else 0.0,
                        s_next=state_features(query, call[: step + 1], step + 1, max_steps),
                        terminal=terminal,
                    )
                )
    net = ValueNet(hidden=int(cfg["hidden"]), gamma=float(cfg["gamma"]), seed=args.seed)
    losses = train_value(
        net,
        buffer,
        steps=int(cfg["steps"]),
        batch_size=int(cfg["batch-size"]),
        step_size=float(cfg["step-size"]),
        sync_every=int(cfg["sync-every"]),
        seed=args.seed,
    )
    save_value_net(net, args.out, seed=args.seed)
    print(f"{len(buffer)} transitions, {len(losses)} updates, final loss {losses[-1]:.5f}")
    return 0


def _cmd_run_grid(args: argparse.Namespace) -> int:
    from .harness.grid import emit_report, run_grid

    cfg = _merged(
        args, "grid",
        {"backend": "toy", "tasks-per-family": None, "max-new": 96},
    )
    report = run_grid(
        seed=args.seed,
        backend=cfg["backend"],
        tasks_per_family=(
            int(cfg["tasks-per-family"]) if cfg["tasks-per-family"] is not None else None
        ),
        max_new_tokens=int(cfg["max-new"]),
        progress=args.progress,
    )
    path = emit_report(report, args.out)
    print(f"report: {path}")
    print(f"content hash: {report.content_hash()}")
    print(f"wall time: {report.wall_time_s:.1f}s")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="toollab")
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, default=42)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile-schema", help="schema JSON -> canonical-call regex")
    p.add_argument("schema")
    p.add_argument("--dot", help="also write the token automaton as GraphViz DOT")
    p.set_defaults(func=_cmd_compile_schema)

    p = sub.add_parser("generate", help="constrained generation for one query")
    p.add_argument("--schema", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--family", default=None)
    p.add_argument("--backend", default=None, choices=["toy", "ngram"])
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--no-docs", action="store_true")
    p.add_argument("--max-new", type=int, default=None)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("hypernet-gen", help="generate LoRA adapters from docs + support")
    p.add_argument("--docs", required=True, help="documentation text file")
    p.add_argument("--support", required=True, help="support examples, one per line")
    p.add_argument("--out", required=True, help="checkpoint path (.bin)")
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--factor", type=int, default=None)
    p.add_argument("--n-layers", type=int, default=None)
    p.set_defaults(func=_cmd_hypernet_gen)

    p = sub.add_parser("train-value", help="fit the TD(0) value net on logged episodes")
    p.add_argument("--episodes", required=True, help="JSONL of {query, call, reward}")
    p.add_argument("--out", required=True, help="checkpoint path (.bin)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--sync-every", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=_cmd_train_value)

    p = sub.add_parser("run-grid", help="run the ablation grid and emit a report")
    p.add_argument("--out", default="grid_report")
    p.add_argument("--backend", default=None, choices=["toy", "ngram"])
    p.add_argument("--tasks-per-family", type=int, default=None)
    p.add_argument("--max-new", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=_cmd_run_grid)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
