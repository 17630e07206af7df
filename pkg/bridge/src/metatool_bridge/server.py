"""Bridge server: an LM backend behind newline-delimited JSON over TCP.

Each connection carries one request at a time; multiple connections are
served concurrently, with model access serialized behind a lock.  Logits and
embeddings travel as base64-encoded little-endian float32 so the byte count
stays bounded and values survive exactly.  See ``PROTOCOL.md`` for the wire
format.
"""

from __future__ import annotations

import base64
import json
import socketserver
import threading
from typing import Callable

import numpy as np

from toollab.lm import (
    EMBED_DIM,
    ScriptedBackend,
    ToyTransformer,
    byte_vocabulary,
    embed_text,
    fit_ngram,
)
from toollab.prompts import DEFAULT_EXAMPLES

PROTOCOL_VERSION = 1
DEFAULT_PORT = 7077
ADVERTISED_CONTEXT = 4096  # serving-side limit; longer contexts are truncated

MODEL_IDS = ("toy", "ngram", "scripted")
ENCODER_IDS = ("trigram",)


class ModelLoadError(RuntimeError):
    """A model or encoder id failed to load at startup."""


def load_model(model_id: str, seed: int = 42):
    if model_id == "toy":
        return ToyTransformer(seed=seed)
    if model_id == "ngram":
        corpus = "\n".join(
            output for family in DEFAULT_EXAMPLES for _q, output in DEFAULT_EXAMPLES[family]
        )
        return fit_ngram(corpus, order=3)
    if model_id == "scripted":
        return ScriptedBackend(byte_vocabulary(), script={})
    raise ModelLoadError(f"unknown model id {model_id!r}; available: {', '.join(MODEL_IDS)}")


def load_encoder(encoder_id: str) -> Callable[[str], np.ndarray]:
    if encoder_id == "trigram":
        return embed_text
    raise ModelLoadError(
        f"unknown encoder id {encoder_id!r}; available: {', '.join(ENCODER_IDS)}"
    )


def _b64_f32(values: np.ndarray) -> str:
    return base64.b64encode(np.asarray(values, dtype="<f4").tobytes()).decode("ascii")


class BridgeServer:
    """Owns the backend, the encoder, and the listening socket."""

    def __init__(
        self,
        model: str = "toy",
        encoder: str = "trigram",
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        seed: int = 42,
        context: int = ADVERTISED_CONTEXT,
    ):
        self.backend = load_model(model, seed=seed)
        self.encode = load_encoder(encoder)
        self.context_limit = context
        self._model_lock = threading.Lock()
        self._window = getattr(self.backend, "max_context", None)

        bridge = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self) -> None:
                while True:
                    line = self.rfile.readline()
                    if not line:
                        return
                    response = bridge.handle_line(line)
                    self.wfile.write(json.dumps(response).encode() + b"\n")
                    self.wfile.flush()

        class Tcp(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = Tcp((host, port), Handler)
        self.host, self.port = self._tcp.server_address[:2]

    # -- request handling ----------------------------------------------------

    def handle_line(self, line: bytes) -> dict:
        """One request in, one response out; errors never drop the connection."""
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"id": None, "error": f"malformed JSON: {exc}"}
        req_id = request.get("id") if isinstance(request, dict) else None
        try:
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            op = request.get("op")
            if op == "info":
                payload = self._op_info()
            elif op == "tokenize":
                payload = self._op_tokenize(request)
            elif op == "detokenize":
                payload = self._op_detokenize(request)
            elif op == "logits":
                payload = self._op_logits(request)
            elif op == "embed":
                payload = self._op_embed(request)
            else:
                raise ValueError(f"unknown op {op!r}")
        except Exception as exc:
            return {"id": req_id, "error": str(exc)}
        return {"id": req_id, "version": PROTOCOL_VERSION, **payload}

    def _op_info(self) -> dict:
        vocab = self.backend.vocab
        return {
            "vocab_size": vocab.size,
            "eos_id": vocab.eos_id,
            "embed_dim": EMBED_DIM,
            "context": self.context_limit,
        }

    def _op_tokenize(self, request: dict) -> dict:
        return {"ids": list(self.backend.vocab.tokenize(str(request["text"])))}

    def _op_detokenize(self, request: dict) -> dict:
        ids = [int(i) for i in request["ids"]]
        return {"text": self.backend.vocab.detokenize(ids)}

    def _op_logits(self, request: dict) -> dict:
        context = [int(i) for i in request["context"]]
        if len(context) > self.context_limit:
            context = context[-self.context_limit:]
        if self._window is not None:
            context = context[-self._window:]
        with self._model_lock:
            logits = self.backend.next_logits(context)
        if logits.shape[0] != self.backend.vocab.size:
            raise RuntimeError("backend produced logits of the wrong width")
        return {"logits_b64": _b64_f32(logits)}

    def _op_embed(self, request: dict) -> dict:
        embedding = self.encode(str(request["text"]))
        if embedding.shape != (EMBED_DIM,):
            raise RuntimeError("encoder produced an embedding of the wrong width")
        return {"embedding_b64": _b64_f32(embedding), "embed_dim": EMBED_DIM}

    # -- lifecycle -----------------------------------------------------------

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()

    def __enter__(self) -> "BridgeServer":
        self.start_background()
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(model: str, encoder: str, port: int = DEFAULT_PORT, host: str = "127.0.0.1") -> BridgeServer:
    """Load the model and encoder, bind the port, and serve in the background."""
    server = BridgeServer(model=model, encoder=encoder, host=host, port=port)
    server.start_background()
    return server
