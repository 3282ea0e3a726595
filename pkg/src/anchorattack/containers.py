"""Flat binary containers for replayable artifacts.

Three formats, all little-endian, each with a 4-byte magic and a version
byte so readers fail loudly on foreign files:

Tensor container (``ATNS``)
    magic, version=1, dtype code (0 = float32, 1 = float64), ndim (u8),
    ndim x u64 dims, raw C-order data.

Encoder snapshot (``AENC``)
    magic, version=1, seven u32 config fields (image_height, image_width,
    channels, patch_size, depth, heads, token_dim), f64 mlp_ratio, i64 seed,
    dtype code, u32 parameter count, then per parameter: u16 name length,
    UTF-8 name, u8 ndim, u64 dims, raw data. Parameters appear in
    ``encoder.param_order`` order.

Prototype bank (``ABNK``)
    magic, version=1, u32 K/N/d/m, u8 mode code, i64 seed, 32-byte source
    hash, u8 flags (bit0: samples present, bit1: global mean present), then
    float64 prototypes [K, N, d], u32 assignments [m], u32 cluster sizes
    [K], optional float64 samples [m, N, d], optional float64 global mean
    [N, d].
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderState, param_order
from .errors import MalformedMessageError
from .prototypes import GUIDANCE_MODES, PrototypeBank

TENSOR_MAGIC = b"ATNS"
SNAPSHOT_MAGIC = b"AENC"
BANK_MAGIC = b"ABNK"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _dtype_code(dtype: np.dtype) -> int:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return 0
    if dtype == np.float64:
        return 1
    raise ValueError(f"unsupported dtype {dtype}")


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise MalformedMessageError(f"container truncated: wanted {n} bytes, got {len(data)}")
    return data


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_array(fh, shape, dtype) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, count * np.dtype(dtype).itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


# -- tensor container ---------------------------------------------------------


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr.dtype)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BBB", 1, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        _write_array(fh, arr.astype(_DTYPE_CODES[code]))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != TENSOR_MAGIC:
            raise MalformedMessageError(f"{path}: not a tensor container")
        version, code, ndim = struct.unpack("<BBB", _read_exact(fh, 3))
        if version != 1:
            raise MalformedMessageError(f"{path}: unsupported tensor version {version}")
        if code not in _DTYPE_CODES:
            raise MalformedMessageError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
        return _read_array(fh, shape, _DTYPE_CODES[code])


# -- encoder snapshot ---------------------------------------------------------


def write_snapshot(path, state: EncoderState) -> None:
    cfg = state.config
    order = param_order(cfg)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<B", 1))
        fh.write(
            struct.pack(
                "<7I",
                cfg.image_height,
                cfg.image_width,
                cfg.channels,
                cfg.patch_size,
                cfg.depth,
                cfg.heads,
                cfg.token_dim,
            )
        )
        fh.write(struct.pack("<dq", cfg.mlp_ratio, cfg.seed))
        fh.write(struct.pack("<BI", _dtype_code(state.dtype), len(order)))
        for name, shape, _ in order:
            arr = state.params[name]
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            _write_array(fh, arr)


def read_snapshot(path) -> EncoderState:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != SNAPSHOT_MAGIC:
            raise MalformedMessageError(f"{path}: not an encoder snapshot")
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != 1:
            raise MalformedMessageError(f"{path}: unsupported snapshot version {version}")
        h, w, c, p, depth, heads, d = struct.unpack("<7I", _read_exact(fh, 28))
        mlp_ratio, seed = struct.unpack("<dq", _read_exact(fh, 16))
        code, count = struct.unpack("<BI", _read_exact(fh, 5))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise MalformedMessageError(f"{path}: unknown dtype code {code}")
        cfg = EncoderConfig(
            image_height=h,
            image_width=w,
            channels=c,
            patch_size=p,
            depth=depth,
            heads=heads,
            token_dim=d,
            mlp_ratio=mlp_ratio,
            seed=seed,
        )
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            params[name] = _read_array(fh, shape, dtype)
        expected = {name for name, _, _ in param_order(cfg)}
        if set(params) != expected:
            raise MalformedMessageError(f"{path}: parameter set does not match config")
        return EncoderState(config=cfg, params=params, dtype=np.dtype(dtype))


# -- prototype bank -----------------------------------------------------------


def write_bank(path, bank: PrototypeBank, seed: int = 0, source_hash: bytes = b"") -> None:
    k, n, d = bank.prototypes.shape
    m = bank.assignments.shape[0]
    digest = (source_hash or b"\x00" * 32)[:32].ljust(32, b"\x00")
    flags = (1 if bank.samples is not None else 0) | (2 if bank.global_mean is not None else 0)
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<4I", k, n, d, m))
        fh.write(struct.pack("<Bq", GUIDANCE_MODES.index(bank.mode), seed))
        fh.write(digest)
        fh.write(struct.pack("<B", flags))
        _write_array(fh, bank.prototypes.astype("<f8"))
        _write_array(fh, bank.assignments.astype("<u4"))
        _write_array(fh, bank.cluster_sizes.astype("<u4"))
        if bank.samples is not None:
            _write_array(fh, bank.samples.astype("<f8"))
        if bank.global_mean is not None:
            _write_array(fh, bank.global_mean.astype("<f8"))


def read_bank(path) -> tuple[PrototypeBank, int, bytes]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != BANK_MAGIC:
            raise MalformedMessageError(f"{path}: not a prototype bank")
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != 1:
            raise MalformedMessageError(f"{path}: unsupported bank version {version}")
        k, n, d, m = struct.unpack("<4I", _read_exact(fh, 16))
        mode_code, seed = struct.unpack("<Bq", _read_exact(fh, 9))
        if mode_code >= len(GUIDANCE_MODES):
            raise MalformedMessageError(f"{path}: unknown guidance mode code {mode_code}")
        digest = _read_exact(fh, 32)
        (flags,) = struct.unpack("<B", _read_exact(fh, 1))
        prototypes = _read_array(fh, (k, n, d), "<f8")
        assignments = _read_array(fh, (m,), "<u4").astype(np.int64)
        sizes = _read_array(fh, (k,), "<u4").astype(np.int64)
        samples = _read_array(fh, (m, n, d), "<f8") if flags & 1 else None
        global_mean = _read_array(fh, (n, d), "<f8") if flags & 2 else None
        bank = PrototypeBank(
            prototypes=prototypes,
            assignments=assignments,
            cluster_sizes=sizes,
            mode=GUIDANCE_MODES[mode_code],
            samples=samples,
            global_mean=global_mean,
        )
        return bank, seed, digest


def tensor_bytes(arr: np.ndarray) -> bytes:
    """In-memory tensor container, for hashing and golden fixtures."""
    buf = io.BytesIO()
    arr = np.asarray(arr)
    code = _dtype_code(arr.dtype)
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<BBB", 1, code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr.astype(_DTYPE_CODES[code])).tobytes())
    return buf.getvalue()


def is_tensor_file(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == TENSOR_MAGIC
    except OSError:
        return False


def sniff_magic(path) -> bytes:
    with open(Path(path), "rb") as fh:
        return fh.read(4)
