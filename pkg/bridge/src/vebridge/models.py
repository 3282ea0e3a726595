"""Served models: torch encoders exposing features, attention rows and VJPs.

Every served model presents the same surface:

    info()                    -> dict of declared dimensions
    encode(image [C,H,W])     -> (patch_tokens [N,d], class_token [d],
                                  attention rows [L,H,N+1])
    vjp(image, cot_patch, cot_class) -> pixel gradient [C,H,W]

Two families are supported. ``micro:<snapshot>`` re-implements the compact
reference transformer in torch, loading its parameters from the documented
AENC snapshot container, so a remote engine can verify the bridge against
an independent implementation of the same function. ``vit...`` ids wrap the
torchvision VisionTransformer; its fused attention hides the softmax rows,
so a forward hook recomputes each layer's class-token row from the
attention module's own projection weights (identical math, non-fused).

Models without a class token have no well-defined class-attention row and
are not served.
"""

from __future__ import annotations

import math
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

SNAPSHOT_MAGIC = b"AENC"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

CACHE_ENV_VAR = "VEBRIDGE_CACHE_DIR"


class ModelLoadError(RuntimeError):
    """The requested model cannot be served; the server refuses to start."""


@dataclass
class ServedModel:
    """A loaded encoder plus its declared dimensions and attention coverage."""

    identifier: str
    n: int
    d: int
    layers: int
    heads: int
    input_shape: tuple[int, int, int]
    patch_size: int
    encode_fn: callable = field(repr=False)
    vjp_fn: callable = field(repr=False)
    attention_layers: tuple[int, ...] = ()  # 0-based layers with exact rows
    # torch graphs are serialized; hooks and autograd are not reentrant here
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def info(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "layers": self.layers,
            "heads": self.heads,
            "input_shape": list(self.input_shape),
            "patch_size": self.patch_size,
            "provider_id": f"vebridge:{self.identifier}",
        }

    def encode(self, image: np.ndarray):
        with self.lock:
            return self.encode_fn(image)

    def vjp(self, image: np.ndarray, cot_patch: np.ndarray, cot_class: np.ndarray):
        with self.lock:
            return self.vjp_fn(image, cot_patch, cot_class)


# -- snapshot parsing -----------------------------------------------------------


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ModelLoadError(f"snapshot truncated: wanted {count} bytes, got {len(data)}")
    return data


def load_snapshot(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse an AENC container into (config dict, name -> array)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != SNAPSHOT_MAGIC:
            raise ModelLoadError(f"{path}: not an encoder snapshot")
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != 1:
            raise ModelLoadError(f"{path}: unsupported snapshot version {version}")
        h, w, c, p, depth, heads, d = struct.unpack("<7I", _read_exact(fh, 28))
        mlp_ratio, seed = struct.unpack("<dq", _read_exact(fh, 16))
        code, count = struct.unpack("<BI", _read_exact(fh, 5))
        if code not in _DTYPES:
            raise ModelLoadError(f"{path}: unknown dtype code {code}")
        dtype = _DTYPES[code]
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            total = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            params[name] = np.frombuffer(_read_exact(fh, total), dtype=dtype).reshape(shape).copy()
        config = {
            "image_height": h,
            "image_width": w,
            "channels": c,
            "patch_size": p,
            "depth": depth,
            "heads": heads,
            "token_dim": d,
            "mlp_ratio": mlp_ratio,
            "seed": seed,
        }
        return config, params


# -- torch re-implementation of the reference encoder ------------------------------


class MicroEncoderTorch(nn.Module):
    """The compact pre-norm ViT, rebuilt in torch from a parameter snapshot.

    Mirrors the documented architecture: row-major patch flattening with
    (channel, row, col) feature order, class token plus positional
    embedding, pre-norm blocks with exact-erf GELU, LayerNorm eps 1e-6, a
    final LayerNorm, and per-head softmax(q k^T / sqrt(d_head)) attention
    whose class-token row is recorded at every layer.
    """

    LN_EPS = 1e-6

    def __init__(self, config: dict, params: dict[str, np.ndarray]):
        super().__init__()
        self.cfg = config
        self.grid_h = config["image_height"] // config["patch_size"]
        self.grid_w = config["image_width"] // config["patch_size"]
        self.n = self.grid_h * self.grid_w
        self.heads = config["heads"]
        self.head_dim = config["token_dim"] // config["heads"]
        dtype = torch.float64 if params["patch_w"].dtype == np.float64 else torch.float32
        for name, arr in params.items():
            self.register_buffer(name.replace(".", "__"), torch.from_numpy(arr).to(dtype))
        self.dtype_ = dtype

    def _p(self, name: str) -> torch.Tensor:
        return getattr(self, name.replace(".", "__"))

    def _ln(self, x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=-1, keepdim=True)
        xc = x - mu
        inv = torch.rsqrt((xc * xc).mean(dim=-1, keepdim=True) + self.LN_EPS)
        return xc * inv * g + b

    def forward(self, image: torch.Tensor):
        cfg = self.cfg
        c, p = cfg["channels"], cfg["patch_size"]
        patches = (
            image.reshape(c, self.grid_h, p, self.grid_w, p)
            .permute(1, 3, 0, 2, 4)
            .reshape(self.n, c * p * p)
        )
        tokens = patches @ self._p("patch_w") + self._p("patch_b")
        seq = torch.cat([self._p("cls_token")[None, :], tokens], dim=0) + self._p("pos_embed")

        rows = []
        scale = 1.0 / math.sqrt(self.head_dim)
        for layer in range(cfg["depth"]):
            pre = f"layers.{layer}."
            u = self._ln(seq, self._p(pre + "ln1_g"), self._p(pre + "ln1_b"))
            t = seq.shape[0]

            def heads_of(mat):
                return mat.reshape(t, self.heads, self.head_dim).permute(1, 0, 2)

            q = heads_of(u @ self._p(pre + "w_q") + self._p(pre + "b_q"))
            k = heads_of(u @ self._p(pre + "w_k") + self._p(pre + "b_k"))
            v = heads_of(u @ self._p(pre + "w_v") + self._p(pre + "b_v"))
            att = torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1)
            ctx = (att @ v).permute(1, 0, 2).reshape(t, -1)
            seq = seq + ctx @ self._p(pre + "w_o") + self._p(pre + "b_o")

            u2 = self._ln(seq, self._p(pre + "ln2_g"), self._p(pre + "ln2_b"))
            h1 = u2 @ self._p(pre + "w_mlp1") + self._p(pre + "b_mlp1")
            h2 = torch.nn.functional.gelu(h1, approximate="none")
            seq = seq + h2 @ self._p(pre + "w_mlp2") + self._p(pre + "b_mlp2")
            rows.append(att[:, 0, :])

        out = self._ln(seq, self._p("lnf_g"), self._p("lnf_b"))
        return out[1:], out[0], torch.stack(rows)


def _micro_model(snapshot_path: str) -> ServedModel:
    if not snapshot_path:
        raise ModelLoadError("micro model needs a snapshot path (micro:<path>)")
    config, params = load_snapshot(snapshot_path)
    # identity comes from the snapshot, not its filesystem location
    identifier = f"micro-seed{config['seed']}"
    module = MicroEncoderTorch(config, params)
    module.eval()
    shape = (config["channels"], config["image_height"], config["image_width"])

    def _to_input(image: np.ndarray) -> torch.Tensor:
        if tuple(image.shape) != shape:
            raise ValueError(f"image shape {tuple(image.shape)}, expected {shape}")
        return torch.from_numpy(np.ascontiguousarray(image)).to(module.dtype_)

    def encode_fn(image):
        with torch.no_grad():
            patch, cls, rows = module(_to_input(image))
        return patch.numpy(), cls.numpy(), rows.numpy()

    def vjp_fn(image, cot_patch, cot_class):
        x = _to_input(image).requires_grad_(True)
        patch, cls, _ = module(x)
        contraction = (patch * torch.from_numpy(np.ascontiguousarray(cot_patch)).to(module.dtype_)).sum()
        contraction = contraction + (
            cls * torch.from_numpy(np.ascontiguousarray(cot_class)).to(module.dtype_)
        ).sum()
        (grad,) = torch.autograd.grad(contraction, x)
        return grad.numpy()

    return ServedModel(
        identifier=identifier,
        n=module.n,
        d=config["token_dim"],
        layers=config["depth"],
        heads=config["heads"],
        input_shape=shape,
        patch_size=config["patch_size"],
        encode_fn=encode_fn,
        vjp_fn=vjp_fn,
        attention_layers=tuple(range(config["depth"])),
    )


# -- torchvision VisionTransformer wrapper ------------------------------------------


def _attention_row_recorder(attn: nn.MultiheadAttention, store: list):
    """Forward pre-hook recomputing the class-token softmax row.

    torchvision runs fused attention without returning weights; the hook
    takes the module's own in-projection to rebuild softmax(q_cls K^T /
    sqrt(d_head)) exactly as the fused kernel applies it.
    """

    def hook(module, args, kwargs):
        x = args[0]  # [B, T, D], batch_first
        with torch.no_grad():
            qkv = x @ module.in_proj_weight.T + module.in_proj_bias
            q, k, _ = qkv.chunk(3, dim=-1)
            b, t, d = q.shape
            heads = module.num_heads
            head_dim = d // heads
            qh = q.reshape(b, t, heads, head_dim).permute(0, 2, 1, 3)
            kh = k.reshape(b, t, heads, head_dim).permute(0, 2, 1, 3)
            scores = qh[:, :, 0:1, :] @ kh.transpose(2, 3) / math.sqrt(head_dim)
            store.append(torch.softmax(scores, dim=-1)[0, :, 0, :])

    return attn.register_forward_pre_hook(hook, with_kwargs=True)


def _torchvision_model(identifier: str) -> ServedModel:
    from torchvision.models.vision_transformer import VisionTransformer, vit_b_16, vit_b_32

    cache_dir = os.environ.get(CACHE_ENV_VAR)
    if cache_dir:
        os.environ.setdefault("TORCH_HOME", cache_dir)

    torch.manual_seed(0)  # untrained instantiations are reproducible
    if identifier == "vit_b_16":
        net, image_size, patch = vit_b_16(weights=None), 224, 16
    elif identifier == "vit_b_32":
        net, image_size, patch = vit_b_32(weights=None), 224, 32
    elif identifier.startswith("vit_test"):
        # a small instantiation of the same production class, for fast checks
        image_size, patch = 32, 8
        net = VisionTransformer(
            image_size=image_size,
            patch_size=patch,
            num_layers=3,
            num_heads=4,
            hidden_dim=48,
            mlp_dim=96,
            num_classes=10,
        )
    else:
        raise ModelLoadError(f"unknown model id {identifier!r}")
    net.eval()
    net = net.to(torch.float32)

    encoder = net.encoder
    blocks = list(encoder.layers)
    heads = blocks[0].self_attention.num_heads
    hidden = net.hidden_dim
    n_tokens = (image_size // patch) ** 2
    shape = (3, image_size, image_size)

    rows_store: list = []
    for block in blocks:
        _attention_row_recorder(block.self_attention, rows_store)

    def _tokens(image: np.ndarray) -> torch.Tensor:
        if tuple(image.shape) != shape:
            raise ValueError(f"image shape {tuple(image.shape)}, expected {shape}")
        return torch.from_numpy(np.ascontiguousarray(image)).to(torch.float32)[None]

    def _forward(x: torch.Tensor):
        rows_store.clear()
        t = net._process_input(x)
        cls = net.class_token.expand(t.shape[0], -1, -1)
        t = torch.cat([cls, t], dim=1)
        out = net.encoder(t)
        return out[0, 1:, :], out[0, 0, :], torch.stack(list(rows_store))

    def encode_fn(image):
        with torch.no_grad():
            patch_tokens, class_token, rows = _forward(_tokens(image))
        return patch_tokens.numpy(), class_token.numpy(), rows.numpy()

    def vjp_fn(image, cot_patch, cot_class):
        x = _tokens(image).requires_grad_(True)
        patch_tokens, class_token, _ = _forward(x)
        contraction = (patch_tokens * torch.from_numpy(np.ascontiguousarray(cot_patch)).float()).sum()
        contraction = contraction + (
            class_token * torch.from_numpy(np.ascontiguousarray(cot_class)).float()
        ).sum()
        (grad,) = torch.autograd.grad(contraction, x)
        return grad[0].numpy()

    return ServedModel(
        identifier=identifier,
        n=n_tokens,
        d=hidden,
        layers=len(blocks),
        heads=heads,
        input_shape=shape,
        patch_size=patch,
        encode_fn=encode_fn,
        vjp_fn=vjp_fn,
        attention_layers=tuple(range(len(blocks))),
    )


def load_model(identifier: str) -> ServedModel:
    """Resolve a model id: ``micro:<snapshot path>`` or a torchvision id."""
    try:
        if identifier.startswith("micro:") or identifier == "micro":
            _, _, path = identifier.partition(":")
            return _micro_model(path)
        return _torchvision_model(identifier)
    except ModelLoadError:
        raise
    except (OSError, ValueError, RuntimeError) as exc:
        raise ModelLoadError(f"cannot load {identifier!r}: {exc}") from exc
