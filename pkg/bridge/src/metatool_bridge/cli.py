"""``metatool-bridge``: serve a model and encoder over the bridge protocol."""

from __future__ import annotations

import argparse
import sys

from .server import DEFAULT_PORT, ENCODER_IDS, MODEL_IDS, BridgeServer, ModelLoadError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="metatool-bridge")
    parser.add_argument("--model", required=True, choices=MODEL_IDS)
    parser.add_argument("--encoder", required=True, choices=ENCODER_IDS)
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args(argv)

    try:
        server = BridgeServer(
            model=args.model, encoder=args.encoder,
            host=args.host, port=args.port, seed=args.seed,
        )
    except ModelLoadError as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        return 1

    print(f"serving {args.model} + {args.encoder} on {server.host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
