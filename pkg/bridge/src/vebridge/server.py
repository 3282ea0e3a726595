"""Protocol server loop: one worker per connection, stateless per request.

Shape problems and degenerate payloads become protocol error replies; a
framing failure ends the connection. The served model's lock serializes
forward/backward work, so concurrent connections are safe.
"""

from __future__ import annotations

import logging
import socketserver
import threading

from . import wire
from .models import ServedModel

log = logging.getLogger(__name__)


def _error(msg_id, code: str, message: str) -> dict:
    return {"kind": "error", "id": msg_id, "code": code, "message": message}


def handle_message(model: ServedModel, msg: dict) -> dict:
    msg_id = msg.get("id")
    kind = msg.get("kind")
    try:
        if kind == "hello":
            if msg.get("version") != wire.PROTOCOL_VERSION:
                return _error(msg_id, "version", f"server speaks protocol {wire.PROTOCOL_VERSION!r}")
            return {"kind": "hello", "version": wire.PROTOCOL_VERSION, "id": msg_id}
        if kind == "info":
            payload = {"kind": "info", "id": msg_id}
            payload.update(model.info())
            return payload
        if kind == "encode_request":
            patch_tokens, class_token, rows = model.encode(wire.decode_tensor(msg["image"]))
            return {
                "kind": "encode_reply",
                "id": msg_id,
                "patch_tokens": wire.encode_tensor(patch_tokens),
                "class_token": wire.encode_tensor(class_token),
                "attention": wire.encode_tensor(rows),
            }
        if kind == "vjp_request":
            image = wire.decode_tensor(msg["image"])
            cot_patch = wire.decode_tensor(msg["cotangent_patch"])
            cot_class = wire.decode_tensor(msg["cotangent_class"])
            if cot_patch.shape != (model.n, model.d):
                raise ValueError(
                    f"cotangent shape {cot_patch.shape}, expected {(model.n, model.d)}"
                )
            if cot_class.shape != (model.d,):
                raise ValueError(f"class cotangent shape {cot_class.shape}, expected ({model.d},)")
            grad = model.vjp(image, cot_patch, cot_class)
            return {"kind": "vjp_reply", "id": msg_id, "gradient": wire.encode_tensor(grad)}
        return _error(msg_id, "malformed", f"unexpected kind {kind!r}")
    except ValueError as exc:
        return _error(msg_id, "shape", str(exc))
    except KeyError as exc:
        return _error(msg_id, "malformed", f"missing field {exc}")
    except wire.WireFault as exc:
        return _error(msg_id, exc.code, exc.message)


def serve_stream(model: ServedModel, rfile, wfile) -> None:
    while True:
        try:
            msg = wire.read_frame(rfile)
        except wire.WireFault as exc:
            try:
                wire.write_frame(wfile, _error(None, exc.code, exc.message))
            except OSError:
                pass
            return
        except OSError:
            return
        if msg is None:
            return
        reply = handle_message(model, msg)
        try:
            wire.write_frame(wfile, reply)
        except OSError:
            return
        if reply["kind"] == "error" and reply["code"] == "version":
            return


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        serve_stream(self.server.model, self.rfile, self.wfile)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BridgeServer:
    def __init__(self, model: ServedModel, host: str = "127.0.0.1", port: int = 0):
        self._server = _ThreadingServer((host, port), _Handler)
        self._server.model = model
        self.host, self.port = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "BridgeServer":
        self._thread.start()
        log.info("bridge serving %s on %s:%d", self._server.model.identifier, self.host, self.port)
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve_stdio(model: ServedModel, stdin_buffer, stdout_buffer) -> None:
    serve_stream(model, stdin_buffer, stdout_buffer)
