#!/usr/bin/env python3
"""A first look at the reference encoder.

Builds the self-contained micro vision transformer, encodes a synthetic
image, inspects the token features and per-layer class-token attention, and
cross-checks the hand-written backward pass against finite differences.
"""

import numpy as np

from anchorattack import EncoderConfig, encode, fd_gradient_oracle, init_encoder, vjp
from anchorattack.synthdata import generate_image

# 32x32 RGB input, 4x4 patches -> 64 patch tokens, 4 layers, 4 heads, width 32
config = EncoderConfig(seed=26)
encoder = init_encoder(config)
print(f"encoder: {config.num_patches} patch tokens, dim {config.token_dim}, "
      f"{config.depth} layers x {config.heads} heads")

image = generate_image(label=1, seed=7)  # a green disk on a gradient background
features, profile = encode(encoder, image)
print("patch tokens:", features.patch_tokens.shape, " class token:", features.class_token.shape)

# every attention row is a probability vector over (class, patch_1..patch_N)
print("attention rows:", profile.rows.shape)
print("row sums (layer 0):", np.round(profile.rows[0].sum(axis=-1), 12))

# head-averaged class attention at the middle layer, reshaped to the patch grid
mid = (config.depth + 1) // 2 - 1
attn = profile.rows[mid].mean(axis=0)[1:].reshape(config.grid_height, config.grid_width)
print(f"\nclass-token attention over the {config.grid_height}x{config.grid_width} patch grid "
      f"(layer {mid + 1}, head mean):")
for row in attn:
    print("  " + " ".join(f"{v:.4f}" for v in row))

# the backward pass is exact: compare against central finite differences
rng = np.random.default_rng(0)
cot_patch = rng.normal(size=features.patch_tokens.shape)
cot_class = rng.normal(size=features.class_token.shape)
grad = vjp(encoder, image, cot_patch, cot_class)

def loss(f):
    return float((f.patch_tokens * cot_patch).sum() + (f.class_token * cot_class).sum())

probes = rng.choice(image.size, size=25, replace=False)
fd = fd_gradient_oracle(encoder, image, loss, h=1e-4, pixel_indices=probes)
a, b = grad.reshape(-1)[probes], fd.reshape(-1)[probes]
rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-4)
print(f"\nvjp vs finite differences over {len(probes)} pixels: max rel err {rel.max():.2e}")
