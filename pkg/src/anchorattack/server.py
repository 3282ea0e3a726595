"""Wire-protocol server over any in-process provider.

Used by the ``serve-loopback`` command and by tests: it exposes the local
reference encoder to remote clients, over TCP (one worker thread per
connection) or over a stdio pipe pair for subprocess bridges. Per-request
failures become error replies; framing failures close the connection.
"""

from __future__ import annotations

import logging
import socketserver
import threading

from . import wire
from .errors import DegenerateFeatureError, MalformedMessageError, ShapeError, WireError

log = logging.getLogger(__name__)


def _error_reply(msg_id, code: str, message: str) -> dict:
    return {"kind": "error", "id": msg_id, "code": code, "message": message}


def handle_message(provider, msg: dict) -> dict:
    """Map one request to its reply. Raises nothing; errors become replies."""
    msg_id = msg.get("id")
    kind = msg.get("kind")
    try:
        if kind == "hello":
            if msg.get("version") != wire.PROTOCOL_VERSION:
                return _error_reply(
                    msg_id,
                    "version",
                    f"server speaks protocol {wire.PROTOCOL_VERSION!r}",
                )
            return {"kind": "hello", "version": wire.PROTOCOL_VERSION, "id": msg_id}
        if kind == "info":
            info = provider.info()
            return {
                "kind": "info",
                "id": msg_id,
                "n": info.n,
                "d": info.d,
                "layers": info.layers,
                "heads": info.heads,
                "input_shape": list(info.input_shape),
                "patch_size": info.patch_size,
                "provider_id": info.provider_id,
            }
        if kind == "encode_request":
            features, profile = provider.encode(wire.decode_tensor(msg["image"]))
            return {
                "kind": "encode_reply",
                "id": msg_id,
                "patch_tokens": wire.encode_tensor(features.patch_tokens),
                "class_token": wire.encode_tensor(features.class_token),
                "attention": wire.encode_tensor(profile.rows),
            }
        if kind == "vjp_request":
            grad = provider.vjp(
                wire.decode_tensor(msg["image"]),
                wire.decode_tensor(msg["cotangent_patch"]),
                wire.decode_tensor(msg["cotangent_class"]),
            )
            return {"kind": "vjp_reply", "id": msg_id, "gradient": wire.encode_tensor(grad)}
        return _error_reply(msg_id, "malformed", f"unexpected kind {kind!r}")
    except ShapeError as exc:
        return _error_reply(msg_id, "shape", str(exc))
    except DegenerateFeatureError as exc:
        return _error_reply(msg_id, "degenerate", str(exc))
    except KeyError as exc:
        return _error_reply(msg_id, "malformed", f"missing field {exc}")
    except MalformedMessageError as exc:
        return _error_reply(msg_id, "malformed", exc.message)


def serve_stream(provider, rfile, wfile) -> None:
    """Answer frames on one stream until end-of-stream or a framing error."""
    while True:
        try:
            msg = wire.read_frame(rfile)
        except MalformedMessageError as exc:
            try:
                wire.write_frame(wfile, _error_reply(None, "malformed", exc.message))
            except WireError:
                pass
            return
        except WireError:
            return
        if msg is None:
            return
        reply = handle_message(provider, msg)
        try:
            wire.write_frame(wfile, reply)
        except WireError:
            return
        if reply["kind"] == "error" and reply["code"] == "version":
            return


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        serve_stream(self.server.provider, self.rfile, self.wfile)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TcpEncoderServer:
    """Background TCP server; ``port`` is resolved after bind (use 0 to pick)."""

    def __init__(self, provider, host: str = "127.0.0.1", port: int = 0):
        self._server = _ThreadingServer((host, port), _Handler)
        self._server.provider = provider
        self.host, self.port = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "TcpEncoderServer":
        self._thread.start()
        log.info("encoder server listening on %s:%d", self.host, self.port)
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve_stdio(provider, stdin_buffer, stdout_buffer) -> None:
    """Single-stream stdio transport with the same framing as TCP."""
    serve_stream(provider, stdin_buffer, stdout_buffer)
