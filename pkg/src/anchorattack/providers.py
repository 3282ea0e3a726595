"""Encoder providers: the contract the attack engine optimizes against.

A provider exposes three calls: ``info`` (dimensions, cached), ``encode``
(token features plus attention profile) and ``vjp`` (pixel gradient of a
cotangent contraction). The in-process provider wraps the reference encoder
directly; the remote provider speaks the wire protocol to any server that
implements it, shipping cotangents rather than loss definitions so all
attack logic stays on the client.
"""

from __future__ import annotations

import socket
import threading
import uuid
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import encoder as enc_mod
from . import wire
from .encoder import AttentionProfile, EncoderState, TokenFeatures
from .errors import (
    MalformedMessageError,
    ProtocolVersionError,
    RemoteServerError,
    TransportError,
)


@dataclass(frozen=True)
class EncoderInfo:
    n: int
    d: int
    layers: int
    heads: int
    input_shape: tuple[int, int, int]  # (channels, height, width)
    patch_size: int
    provider_id: str


class EncoderProvider(Protocol):
    def info(self) -> EncoderInfo: ...

    def encode(self, x: np.ndarray) -> tuple[TokenFeatures, AttentionProfile]: ...

    def vjp(
        self, x: np.ndarray, cotangent_patch: np.ndarray, cotangent_class: np.ndarray
    ) -> np.ndarray: ...


class LocalEncoderProvider:
    """Pure in-process provider over an immutable encoder state."""

    def __init__(self, state: EncoderState):
        self.state = state
        cfg = state.config
        self._info = EncoderInfo(
            n=cfg.num_patches,
            d=cfg.token_dim,
            layers=cfg.depth,
            heads=cfg.heads,
            input_shape=(cfg.channels, cfg.image_height, cfg.image_width),
            patch_size=cfg.patch_size,
            provider_id=f"micro-vit-seed{cfg.seed}",
        )

    def info(self) -> EncoderInfo:
        return self._info

    def encode(self, x):
        return enc_mod.encode(self.state, x)

    def vjp(self, x, cotangent_patch, cotangent_class):
        return enc_mod.vjp(self.state, x, cotangent_patch, cotangent_class)


class Connection:
    """One logical stream with at most one request in flight.

    Owns a read/write file pair (socket or pipe endpoints). Not shared
    between workers; open one connection per worker instead.
    """

    def __init__(self, rfile, wfile, closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self._lock = threading.Lock()

    def round_trip(self, msg: dict) -> dict:
        with self._lock:
            wire.write_frame(self._wfile, msg)
            reply = wire.read_frame(self._rfile)
        if reply is None:
            raise TransportError("connection closed while waiting for a reply")
        if reply.get("id") != msg["id"]:
            raise MalformedMessageError(
                f"correlation id mismatch: sent {msg['id']!r}, got {reply.get('id')!r}"
            )
        if reply["kind"] == "error":
            raise RemoteServerError(
                str(reply.get("code", "unknown")), str(reply.get("message", ""))
            )
        return reply

    def close(self) -> None:
        for fh in (self._wfile, self._rfile):
            try:
                fh.close()
            except OSError:
                pass
        if self._closer is not None:
            try:
                self._closer()
            except OSError:
                pass


def _new_id() -> str:
    return uuid.uuid4().hex


class RemoteEncoderProvider:
    """Wire-protocol client; performs the hello handshake on construction."""

    def __init__(self, connection: Connection):
        self.connection = connection
        reply = connection.round_trip(
            {"kind": "hello", "version": wire.PROTOCOL_VERSION, "id": _new_id()}
        )
        if reply["kind"] != "hello":
            raise MalformedMessageError(f"expected hello reply, got {reply['kind']!r}")
        if reply.get("version") != wire.PROTOCOL_VERSION:
            raise ProtocolVersionError(
                f"server speaks version {reply.get('version')!r}, "
                f"client needs {wire.PROTOCOL_VERSION!r}"
            )
        self._info: EncoderInfo | None = None

    def info(self) -> EncoderInfo:
        if self._info is None:
            reply = self.connection.round_trip({"kind": "info", "id": _new_id()})
            if reply["kind"] != "info":
                raise MalformedMessageError(f"expected info reply, got {reply['kind']!r}")
            self._info = EncoderInfo(
                n=int(reply["n"]),
                d=int(reply["d"]),
                layers=int(reply["layers"]),
                heads=int(reply["heads"]),
                input_shape=tuple(int(v) for v in reply["input_shape"]),
                patch_size=int(reply["patch_size"]),
                provider_id=str(reply["provider_id"]),
            )
        return self._info

    def encode(self, x):
        reply = self.connection.round_trip(
            {"kind": "encode_request", "id": _new_id(), "image": wire.encode_tensor(x)}
        )
        if reply["kind"] != "encode_reply":
            raise MalformedMessageError(f"expected encode reply, got {reply['kind']!r}")
        features = TokenFeatures(
            patch_tokens=wire.decode_tensor(reply["patch_tokens"]),
            class_token=wire.decode_tensor(reply["class_token"]),
        )
        return features, AttentionProfile(wire.decode_tensor(reply["attention"]))

    def vjp(self, x, cotangent_patch, cotangent_class):
        reply = self.connection.round_trip(
            {
                "kind": "vjp_request",
                "id": _new_id(),
                "image": wire.encode_tensor(x),
                "cotangent_patch": wire.encode_tensor(cotangent_patch),
                "cotangent_class": wire.encode_tensor(cotangent_class),
            }
        )
        if reply["kind"] != "vjp_reply":
            raise MalformedMessageError(f"expected vjp reply, got {reply['kind']!r}")
        return wire.decode_tensor(reply["gradient"])

    def close(self) -> None:
        self.connection.close()


def connect_tcp(host: str, port: int, timeout: float = 30.0) -> RemoteEncoderProvider:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    conn = Connection(sock.makefile("rb"), sock.makefile("wb"), closer=sock.close)
    return RemoteEncoderProvider(conn)


def connect_pipes(rfile, wfile) -> RemoteEncoderProvider:
    """Client over an existing pipe pair, e.g. a subprocess bridge's stdio."""
    return RemoteEncoderProvider(Connection(rfile, wfile))
