"""Server-side implementation of the encoder wire protocol, version "1".

Framing: 4-byte big-endian byte length, then a UTF-8 JSON body serialized
canonically (sorted keys, no whitespace) so identical messages are
byte-identical. Tensors travel as {"shape": [...], "data": base64 of the
little-endian float32 C-order buffer}.

This module is deliberately self-contained: the bridge talks to attack
engines only through these documented bytes.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

PROTOCOL_VERSION = "1"
MAX_FRAME_BYTES = 256 * 1024 * 1024

KINDS = ("hello", "info", "encode_request", "encode_reply", "vjp_request", "vjp_reply", "error")


class WireFault(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def encode_tensor(arr) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": [int(s) for s in arr.shape],
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(obj) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise WireFault("malformed", "tensor payload needs 'shape' and 'data'")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise WireFault("malformed", f"bad base64 tensor data: {exc}") from exc
    shape = tuple(int(s) for s in obj["shape"])
    if len(raw) != int(np.prod(shape, dtype=np.int64)) * 4:
        raise WireFault("malformed", f"tensor byte length mismatch for shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def dump_message(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def write_frame(wfile, msg: dict) -> None:
    wfile.write(dump_message(msg))
    wfile.flush()


def read_frame(rfile) -> dict | None:
    """One message per call; None on clean end-of-stream."""
    header = rfile.read(4)
    if header == b"":
        return None
    if len(header) < 4:
        raise WireFault("malformed", "truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise WireFault("malformed", f"frame length {length} exceeds limit")
    body = b""
    while len(body) < length:
        chunk = rfile.read(length - len(body))
        if not chunk:
            raise WireFault("malformed", "truncated frame body")
        body += chunk
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireFault("malformed", f"frame body is not valid JSON: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("kind") not in KINDS:
        raise WireFault("malformed", "message lacks a known 'kind'")
    return msg
