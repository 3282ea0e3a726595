#!/usr/bin/env python3
"""Scoring attacks with the surrogate-task harness.

Trains a linear probe on clean features of the synthetic fixture task,
attacks a small evaluation set, and reports score reduction rates for the
component ablation: full pipeline, guidance-only, attention-only, and the
plain feature-dissimilarity baseline at an equal step budget.
"""

import numpy as np

from anchorattack import (
    AttackConfig,
    EncoderConfig,
    LocalEncoderProvider,
    ablation_suite,
    build_memory,
    build_prototypes,
    init_encoder,
    kmeans,
    pca_fit,
    pca_project,
    srr,
    train_probe,
)
from anchorattack.synthdata import make_dataset

provider = LocalEncoderProvider(init_encoder(EncoderConfig(seed=26)))

guidance = make_dataset(64, seed=100, id_prefix="guide")
memory = build_memory(provider, [g[1] for g in guidance], [g[0] for g in guidance])
bank = build_prototypes(
    memory, kmeans(pca_project(pca_fit(memory, 16), memory), 4, seed=0), 4, keep_samples=True
)

train = [(img, lbl) for _, img, lbl in make_dataset(64, seed=102, id_prefix="train")]
task = train_probe(provider, train, seed=1)
evaluation = make_dataset(16, seed=103, id_prefix="eval")
images = [img for _, img, _ in evaluation]
labels = [lbl for _, _, lbl in evaluation]

clean_grids = [provider.encode(x)[0].patch_tokens for x in images]
print(f"clean probe accuracy: {task.score(clean_grids, labels):.3f}")

# SRR is plain arithmetic over a score pair: 1 - adv/clean
print("srr(10, 4) =", srr(10.0, 4.0).srr)

base = AttackConfig(epsilon=8 / 255, alpha=2 / 255, s1=10, s2=20, seed=0)
grid = [
    {},                                                # full pipeline, 30 steps
    {"use_attention": False},                          # guidance only
    {"guidance_weight": 0.0},                          # attention only
    {"guidance_weight": 0.0, "use_attention": False,   # plain baseline, 30 steps
     "stages": 1, "s1": 30, "eta": 0.0},
]
names = ["full pipeline", "guidance only", "attention only", "plain baseline"]
rows = ablation_suite(provider, bank, images, labels, task, grid, base, seed=0)
print("\n component                srr   score_adv")
for name, row in zip(names, rows):
    print(f"  {name:<20} {row['srr']:+.4f}   {row['score_adv']:.3f}")
