"""LM-backend bridge: tokenizer, logits, and embeddings over a wire protocol."""

from .server import (
    ADVERTISED_CONTEXT,
    DEFAULT_PORT,
    ENCODER_IDS,
    MODEL_IDS,
    PROTOCOL_VERSION,
    BridgeServer,
    ModelLoadError,
    load_encoder,
    load_model,
    serve,
)

__all__ = [
    "ADVERTISED_CONTEXT",
    "BridgeServer",
    "DEFAULT_PORT",
    "ENCODER_IDS",
    "MODEL_IDS",
    "ModelLoadError",
    "PROTOCOL_VERSION",
    "load_encoder",
    "load_model",
    "serve",
]

__version__ = "0.1.0"
