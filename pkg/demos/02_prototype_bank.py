#!/usr/bin/env python3
"""Building the guidance prototype bank.

Encodes a guidance image set into a feature memory, reduces it with PCA for
clustering, forms cluster-mean prototypes in raw feature space, and shows
how the anchor for an attacked image is selected by mean per-token cosine.
"""

import numpy as np

from anchorattack import (
    EncoderConfig,
    LocalEncoderProvider,
    build_memory,
    build_prototypes,
    init_encoder,
    kmeans,
    pca_fit,
    pca_project,
    select_anchor,
)
from anchorattack.similarity import mean_token_cosine
from anchorattack.synthdata import make_dataset

provider = LocalEncoderProvider(init_encoder(EncoderConfig(seed=26)))

# guidance images must be disjoint from anything later attacked
guidance = make_dataset(64, seed=100, id_prefix="guide")
memory = build_memory(
    provider,
    [img for _, img, _ in guidance],
    [image_id for image_id, _, _ in guidance],
    eval_ids={"eval0000"},
)
print(f"memory: m={len(memory)} grids of shape {memory.entries[0].shape}")

# PCA only assigns clusters; prototypes are averaged in the original space
model = pca_fit(memory, width=16)
projected = pca_project(model, memory)
explained = model.explained_variance / model.explained_variance.sum()
print("top-5 explained variance shares:", np.round(explained[:5], 3))

assignments = kmeans(projected, k=4, seed=0)
bank = build_prototypes(memory, assignments, k=4, mode="farthest_prototype", keep_samples=True)
print("cluster sizes:", bank.cluster_sizes.tolist())

# anchor selection for a fresh image: the least-similar prototype
target = make_dataset(1, seed=103, id_prefix="eval")[0][1]
features = provider.encode(target)[0]
anchor, index = select_anchor(bank, features)
sims = [mean_token_cosine(features.patch_tokens, p) for p in bank.prototypes]
print("prototype similarities:", np.round(sims, 4))
print(f"selected anchor: prototype {index} (farthest)")

# variant selection rules used by the guidance ablation
for mode in ("nearest_prototype", "farthest_sample", "nearest_sample", "mean_sample"):
    _, idx = select_anchor(bank, features, mode=mode)
    print(f"  {mode:>18}: index {idx}")
