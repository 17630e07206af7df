"""Bridge protocol conformance against a live server."""

import base64
import json
import socket

import numpy as np
import pytest

from metatool_bridge import ADVERTISED_CONTEXT, BridgeServer, ModelLoadError, serve
from toollab.lm import BridgeBackend, byte_vocabulary, embed_text


@pytest.fixture(scope="module")
def server():
    with BridgeServer(model="toy", port=0) as srv:
        yield srv


@pytest.fixture()
def client(server):
    backend = BridgeBackend("127.0.0.1", server.port)
    yield backend
    backend.close()


class TestInfo:
    def test_advertised_dimensions(self, client):
        assert client.embed_dim == 384
        assert client.context_limit == ADVERTISED_CONTEXT == 4096
        assert client.vocab_size == 257
        assert client.eos_id == 256

    def test_embed_dim_advertised_equals_returned(self, client):
        for text in ("", "hello", "torchvision.models.resnet50(pretrained=True)"):
            assert client.embed(text).shape == (client.embed_dim,)

    def test_embed_matches_local_encoder(self, client):
        assert np.allclose(client.embed("the query"), embed_text("the query"))


class TestTokenRoundTrip:
    @pytest.mark.parametrize("text", ["", "f(a)", "SELECT name FROM employees", "naïve ünïcode"])
    def test_detokenize_inverts_tokenize(self, client, text):
        ids = client.vocab.tokenize(text)
        assert client.vocab.detokenize(ids) == text

    def test_tokenization_matches_local_vocabulary(self, client):
        local = byte_vocabulary()
        assert client.vocab.tokenize("f(a)") == local.tokenize("f(a)")


class TestLogits:
    def test_length_equals_advertised_vocab_size(self, client):
        logits = client.next_logits([102, 40])
        assert logits.shape == (client.vocab_size,)
        assert logits.dtype == np.float32

    def test_deterministic_across_calls(self, client):
        a = client.next_logits([1, 2, 3])
        b = client.next_logits([1, 2, 3])
        assert np.array_equal(a, b)

    def test_matches_local_model_exactly(self, server, client):
        local = server.backend.next_logits([10, 20, 30])
        remote = client.next_logits([10, 20, 30])
        assert np.allclose(remote, local.astype(np.float32), atol=0)

    def test_overlong_context_is_truncated_not_rejected(self, client):
        logits = client.next_logits([65] * (ADVERTISED_CONTEXT + 10))
        assert logits.shape == (client.vocab_size,)


class TestRawWire:
    def raw(self, server, lines):
        with socket.create_connection(("127.0.0.1", server.port)) as sock:
            fh = sock.makefile("rwb")
            responses = []
            for line in lines:
                fh.write(line + b"\n")
                fh.flush()
                responses.append(json.loads(fh.readline()))
            return responses

    def test_id_echoed_and_version_present(self, server):
        (resp,) = self.raw(server, [b'{"id": 77, "op": "info", "version": 1}'])
        assert resp["id"] == 77 and resp["version"] == 1

    def test_errors_preserve_the_connection(self, server):
        responses = self.raw(server, [
            b"this is not json",
            b'{"id": 1, "op": "teleport", "version": 1}',
            b'{"id": 2, "op": "logits", "version": 1}',
            b'{"id": 3, "op": "info", "version": 1}',
        ])
        assert responses[0]["id"] is None and "malformed" in responses[0]["error"]
        assert responses[1] == {"id": 1, "error": "unknown op 'teleport'"}
        assert responses[2]["id"] == 2 and "error" in responses[2]
        assert responses[3]["vocab_size"] == 257  # still serving

    def test_logits_payload_is_base64_little_endian_f32(self, server):
        (resp,) = self.raw(server, [b'{"id": 9, "op": "logits", "version": 1, "context": [5]}'])
        raw = base64.b64decode(resp["logits_b64"])
        assert len(raw) == 4 * 257
        decoded = np.frombuffer(raw, dtype="<f4")
        assert np.array_equal(decoded, server.backend.next_logits([5]).astype(np.float32))


class TestLifecycle:
    def test_unknown_ids_fail_at_startup(self):
        with pytest.raises(ModelLoadError, match="unknown model id"):
            BridgeServer(model="llama-70b", port=0)
        with pytest.raises(ModelLoadError, match="unknown encoder id"):
            BridgeServer(model="scripted", encoder="bert", port=0)

    def test_serve_helper_returns_running_server(self):
        srv = serve("scripted", "trigram", port=0)
        try:
            client = BridgeBackend("127.0.0.1", srv.port)
            assert client.vocab_size == 257
            client.close()
        finally:
            srv.shutdown()

    def test_cli_rejects_unknown_encoder_with_diagnostic(self, capsys):
        from metatool_bridge.cli import main

        with pytest.raises(SystemExit):
            main(["--model", "toy", "--encoder", "minilm", "--port", "0"])
        assert "invalid choice" in capsys.readouterr().err

    def test_two_concurrent_connections(self, server):
        a = BridgeBackend("127.0.0.1", server.port)
        b = BridgeBackend("127.0.0.1", server.port)
        try:
            assert np.array_equal(a.next_logits([7]), b.next_logits([7]))
        finally:
            a.close()
            b.close()
