"""Self-contained vision-transformer reference encoder.

A small pre-norm ViT implemented directly in numpy so the attack pipeline can
be exercised and gradient-checked without any external model runtime. The
encoder exposes three things the rest of the package builds on:

* ``encode``      -- final-layer token features plus the post-softmax
                     class-token attention row of every layer and head,
* ``vjp``         -- the exact pixel-space vector-Jacobian product of the
                     forward map (hand-written reverse mode),
* ``fd_gradient_oracle`` -- a central-difference probe used to cross-check
                     ``vjp`` in tests.

Parameter initialization is fully determined by (config, seed): weights are
drawn from a PCG64 generator as uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) in
the order given by ``param_order``; biases start at zero, norm gains at one.
Blocks are pre-norm (x + Attn(LN(x)), x + MLP(LN(x))) with an exact-erf GELU
and a final LayerNorm, so all pieces of the forward map are smooth and
finite-difference checks stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

LAYERNORM_EPS = 1e-6
# python-float constants: keep float32 arrays float32 under NEP 50 promotion
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class EncoderConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    token_dim: int = 32
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not a multiple "
                f"of patch size {self.patch_size}"
            )
        if self.token_dim % self.heads:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}"
            )
        if self.num_patches < 4:
            raise ConfigError("need at least 4 patch tokens")
        if self.channels < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("channels, depth and heads must be positive")
        if int(self.mlp_hidden) < 1:
            raise ConfigError("mlp_ratio too small: hidden width would be zero")

    @property
    def grid_height(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_width(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.token_dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass(frozen=True)
class TokenFeatures:
    """Final-layer features: one row per patch token plus the class token."""

    patch_tokens: np.ndarray  # [N, d]
    class_token: np.ndarray  # [d]


@dataclass(frozen=True)
class AttentionProfile:
    """Post-softmax class-token attention rows, all layers and heads.

    ``rows[l, h]`` is the attention of the class token over the full
    (class, patch_1..patch_N) sequence at layer ``l``, head ``h``; each row
    is a probability vector.
    """

    rows: np.ndarray  # [L, H, N+1]


@dataclass(frozen=True)
class EncoderState:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(repr=False)
    dtype: np.dtype = np.dtype(np.float64)


def param_order(config: EncoderConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Documented parameter layout: (name, shape, fan_in).

    fan_in == 0 marks parameters that are not randomly drawn (zeros for
    biases and norm shifts, ones for norm gains). Random draws consume the
    seeded generator exactly in this order, which is also the serialization
    order of the snapshot container.
    """
    d = config.token_dim
    mh = config.mlp_hidden
    order = [
        ("patch_w", (config.patch_dim, d), config.patch_dim),
        ("patch_b", (d,), 0),
        ("cls_token", (d,), d),
        ("pos_embed", (config.num_patches + 1, d), d),
    ]
    for l in range(config.depth):
        p = f"layers.{l}."
        order += [
            (p + "ln1_g", (d,), 0),
            (p + "ln1_b", (d,), 0),
            (p + "w_q", (d, d), d),
            (p + "b_q", (d,), 0),
            (p + "w_k", (d, d), d),
            (p + "b_k", (d,), 0),
            (p + "w_v", (d, d), d),
            (p + "b_v", (d,), 0),
            (p + "w_o", (d, d), d),
            (p + "b_o", (d,), 0),
            (p + "ln2_g", (d,), 0),
            (p + "ln2_b", (d,), 0),
            (p + "w_mlp1", (d, mh), d),
            (p + "b_mlp1", (mh,), 0),
            (p + "w_mlp2", (mh, d), mh),
            (p + "b_mlp2", (d,), 0),
        ]
    order += [("lnf_g", (d,), 0), ("lnf_b", (d,), 0)]
    return order


def init_encoder(config: EncoderConfig, dtype=np.float64) -> EncoderState:
    """Build deterministic parameters for ``config``.

    Draws happen in float64 and are cast to ``dtype`` afterwards, so the
    32-bit state is the rounded 64-bit one and both are bit-reproducible.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in param_order(config):
        if fan_in > 0:
            scale = 1.0 / np.sqrt(fan_in)
            t = rng.uniform(-scale, scale, size=shape)
        elif name.endswith("_g"):
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        params[name] = np.ascontiguousarray(t, dtype=dtype)
    return EncoderState(config=config, params=params, dtype=np.dtype(dtype))


def validate_image(x: np.ndarray, config: EncoderConfig) -> None:
    expected = (config.channels, config.image_height, config.image_width)
    if x.shape != expected:
        raise ShapeError(f"image shape {x.shape}, encoder expects {expected}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("image contains non-finite values")


def _patchify(x: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """[C, H, W] -> [N, C*P*P]; patches row-major over the grid, features
    ordered (channel, patch_row, patch_col)."""
    c, p = config.channels, config.patch_size
    gh, gw = config.grid_height, config.grid_width
    t = x.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(t).reshape(gh * gw, c * p * p)


def _unpatchify(g: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Adjoint of ``_patchify``: [N, C*P*P] -> [C, H, W]."""
    c, p = config.channels, config.patch_size
    gh, gw = config.grid_height, config.grid_width
    t = g.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(t).reshape(c, gh * p, gw * p)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYERNORM_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy: np.ndarray, g: np.ndarray, cache) -> np.ndarray:
    xhat, inv = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    n, d = t.shape
    return t.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    h, n, dh = t.shape
    return t.transpose(1, 0, 2).reshape(n, h * dh)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward(enc: EncoderState, x: np.ndarray, keep_tape: bool):
    """Shared forward pass. Returns (patch_tokens, class_token, profile, tape)."""
    cfg = enc.config
    p = enc.params
    scale = cfg.head_dim ** -0.5

    patches = _patchify(np.asarray(x, dtype=enc.dtype), cfg)
    tokens = patches @ p["patch_w"] + p["patch_b"]
    seq = np.concatenate([p["cls_token"][None, :], tokens], axis=0) + p["pos_embed"]

    profile = np.empty((cfg.depth, cfg.heads, cfg.num_patches + 1), dtype=enc.dtype)
    tape = [] if keep_tape else None
    for l in range(cfg.depth):
        pre = f"layers.{l}."
        u, ln1_cache = _layernorm(seq, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = _split_heads(u @ p[pre + "w_q"] + p[pre + "b_q"], cfg.heads)
        k = _split_heads(u @ p[pre + "w_k"] + p[pre + "b_k"], cfg.heads)
        v = _split_heads(u @ p[pre + "w_v"] + p[pre + "b_v"], cfg.heads)
        att = _softmax_rows(np.matmul(q, k.transpose(0, 2, 1)) * scale)
        ctx = _merge_heads(np.matmul(att, v))
        attn_out = ctx @ p[pre + "w_o"] + p[pre + "b_o"]
        seq_mid = seq + attn_out

        u2, ln2_cache = _layernorm(seq_mid, p[pre + "ln2_g"], p[pre + "ln2_b"])
        h1 = u2 @ p[pre + "w_mlp1"] + p[pre + "b_mlp1"]
        h2 = _gelu(h1)
        seq = seq_mid + h2 @ p[pre + "w_mlp2"] + p[pre + "b_mlp2"]

        profile[l] = att[:, 0, :]
        if keep_tape:
            tape.append((ln1_cache, q, k, v, att, ln2_cache, h1))

    out, lnf_cache = _layernorm(seq, p["lnf_g"], p["lnf_b"])
    if keep_tape:
        tape.append(lnf_cache)
    return out[1:], out[0], profile, tape


def encode(enc: EncoderState, x: np.ndarray) -> tuple[TokenFeatures, AttentionProfile]:
    """Forward pass: final-layer token features and all class-token attention rows."""
    validate_image(x, enc.config)
    patch_tokens, class_token, profile, _ = _forward(enc, x, keep_tape=False)
    return TokenFeatures(patch_tokens, class_token), AttentionProfile(profile)


def vjp(
    enc: EncoderState,
    x: np.ndarray,
    cotangent_patch: np.ndarray,
    cotangent_class: np.ndarray,
) -> np.ndarray:
    """Exact d<cotangent, encode(x)> / dx, shape [C, H, W].

    Reverse mode through every layer: final norm, attention softmax, GELU and
    both residual branches. The cotangent pairs with the final-layer patch
    tokens and class token; attention rows are treated as internal (they are
    tapped for diagnostics, not part of the differentiated output).
    """
    validate_image(x, enc.config)
    cfg = enc.config
    p = enc.params
    cotangent_patch = np.asarray(cotangent_patch, dtype=enc.dtype)
    cotangent_class = np.asarray(cotangent_class, dtype=enc.dtype)
    if cotangent_patch.shape != (cfg.num_patches, cfg.token_dim):
        raise ShapeError(
            f"patch cotangent shape {cotangent_patch.shape}, "
            f"expected {(cfg.num_patches, cfg.token_dim)}"
        )
    if cotangent_class.shape != (cfg.token_dim,):
        raise ShapeError(
            f"class cotangent shape {cotangent_class.shape}, expected ({cfg.token_dim},)"
        )

    _, _, _, tape = _forward(enc, x, keep_tape=True)
    scale = cfg.head_dim ** -0.5

    d_out = np.concatenate([cotangent_class[None, :], cotangent_patch], axis=0)
    d_seq = _layernorm_backward(d_out, p["lnf_g"], tape[-1])

    for l in reversed(range(cfg.depth)):
        pre = f"layers.{l}."
        ln1_cache, q, k, v, att, ln2_cache, h1 = tape[l]

        # MLP branch of: seq = seq_mid + MLP(LN2(seq_mid))
        dh2 = d_seq @ p[pre + "w_mlp2"].T
        dh1 = dh2 * _gelu_grad(h1)
        du2 = dh1 @ p[pre + "w_mlp1"].T
        d_seq = d_seq + _layernorm_backward(du2, p[pre + "ln2_g"], ln2_cache)

        # attention branch of: seq_mid = seq + Attn(LN1(seq))
        d_ctx = _split_heads(d_seq @ p[pre + "w_o"].T, cfg.heads)
        d_att = np.matmul(d_ctx, v.transpose(0, 2, 1))
        dv = np.matmul(att.transpose(0, 2, 1), d_ctx)
        d_scores = (d_att - (d_att * att).sum(axis=-1, keepdims=True)) * att
        dq = np.matmul(d_scores, k) * scale
        dk = np.matmul(d_scores.transpose(0, 2, 1), q) * scale
        du = (
            _merge_heads(dq) @ p[pre + "w_q"].T
            + _merge_heads(dk) @ p[pre + "w_k"].T
            + _merge_heads(dv) @ p[pre + "w_v"].T
        )
        d_seq = d_seq + _layernorm_backward(du, p[pre + "ln1_g"], ln1_cache)

    # positional add is identity; class-token row feeds a parameter, not the image
    d_patches = d_seq[1:] @ p["patch_w"].T
    return _unpatchify(d_patches, cfg)


def fd_gradient_oracle(
    enc: EncoderState,
    x: np.ndarray,
    loss,
    h: float = 1e-4,
    pixel_indices: np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference pixel gradient of ``loss(TokenFeatures)``.

    Probes either every pixel or the flat ``pixel_indices`` subset (cost
    control: two encodes per probed pixel). Unprobed entries are NaN so an
    accidental comparison against them fails loudly.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    validate_image(x, enc.config)
    x = np.asarray(x, dtype=enc.dtype)
    flat = x.reshape(-1)
    if pixel_indices is None:
        pixel_indices = np.arange(flat.size)
    grad = np.full(flat.size, np.nan, dtype=enc.dtype)
    for idx in np.asarray(pixel_indices).reshape(-1):
        probe = flat.copy()
        probe[idx] = flat[idx] + h
        f_plus = loss(encode(enc, probe.reshape(x.shape))[0])
        probe[idx] = flat[idx] - h
        f_minus = loss(encode(enc, probe.reshape(x.shape))[0])
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)
