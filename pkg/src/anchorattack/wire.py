"""Framing and message codec for the remote-encoder protocol.

Every message is one length-prefixed document: a 4-byte big-endian byte
length followed by a UTF-8 JSON body. Tensor payloads are dictionaries
``{"shape": [...], "data": <base64>}`` where the data is the little-endian
32-bit float buffer in C order. The JSON is serialized with sorted keys and
no whitespace so a given message always produces the same bytes.

Message kinds and fields (replies echo the request's ``id``):

    hello          {version}                      both directions
    info           {} -> {n, d, layers, heads, input_shape, patch_size,
                          provider_id}
    encode_request {image} -> encode_reply {patch_tokens, class_token,
                          attention}
    vjp_request    {image, cotangent_patch, cotangent_class}
                       -> vjp_reply {gradient}
    error          {code, message}
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

from .errors import MalformedMessageError, TransportError

PROTOCOL_VERSION = "1"
MAX_FRAME_BYTES = 256 * 1024 * 1024

KINDS = ("hello", "info", "encode_request", "encode_reply", "vjp_request", "vjp_reply", "error")


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": [int(s) for s in arr.shape],
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(obj) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise MalformedMessageError("tensor payload needs 'shape' and 'data'")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise MalformedMessageError(f"bad base64 tensor data: {exc}") from exc
    shape = tuple(int(s) for s in obj["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise MalformedMessageError(
            f"tensor byte length {len(raw)} does not match shape {shape}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def dump_message(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise MalformedMessageError("message exceeds frame size limit")
    return struct.pack(">I", len(body)) + body


def write_frame(wfile, msg: dict) -> None:
    try:
        wfile.write(dump_message(msg))
        wfile.flush()
    except (BrokenPipeError, OSError) as exc:
        raise TransportError(f"write failed: {exc}") from exc


def read_frame(rfile) -> dict | None:
    """Read one message; None on a clean end-of-stream before any byte."""
    try:
        header = rfile.read(4)
    except OSError as exc:
        raise TransportError(f"read failed: {exc}") from exc
    if header == b"":
        return None
    if len(header) < 4:
        raise MalformedMessageError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise MalformedMessageError(f"frame length {length} exceeds limit")
    body = b""
    while len(body) < length:
        chunk = rfile.read(length - len(body))
        if not chunk:
            raise MalformedMessageError("truncated frame body")
        body += chunk
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessageError(f"frame body is not valid JSON: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("kind") not in KINDS:
        raise MalformedMessageError("message lacks a known 'kind'")
    return msg
