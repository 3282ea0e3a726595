#!/usr/bin/env python3
"""Diagnostics: token redundancy and attention drift.

Two views into why the attack weights tokens: the token-masking curve
(performance held when a share of tokens is zeroed, randomly or keeping the
highest-attention ones) and the shift of attention weights over a long
attack, which motivates the second-stage refresh.
"""

import numpy as np

from anchorattack import (
    AttackConfig,
    EncoderConfig,
    LocalEncoderProvider,
    attention_shift,
    build_memory,
    build_prototypes,
    init_encoder,
    kmeans,
    pa_attack,
    pca_fit,
    pca_project,
    token_mask_experiment,
    train_probe,
)
from anchorattack.synthdata import make_dataset

provider = LocalEncoderProvider(init_encoder(EncoderConfig(seed=26)))
train = [(img, lbl) for _, img, lbl in make_dataset(64, seed=102, id_prefix="train")]
task = train_probe(provider, train, seed=1)
evaluation = make_dataset(24, seed=103, id_prefix="eval")
images = [img for _, img, _ in evaluation]
labels = [lbl for _, _, lbl in evaluation]

proportions = [0.0, 0.25, 0.5, 0.75, 1.0]
print("masked-token score ratios (vs unmasked):")
print("  rho    random  keep-high")
random_curve = token_mask_experiment(provider, task, images, labels, proportions, "random", seed=0)
keep_curve = token_mask_experiment(
    provider, task, images, labels, proportions, "attention-keep-high", seed=0
)
for (rho, r_rand), (_, r_keep) in zip(random_curve, keep_curve):
    print(f"  {rho:.2f}   {r_rand:.3f}   {r_keep:.3f}")

# attention drift over a 50-step attack: the stage-2 weights reorder tokens
guidance = make_dataset(64, seed=100, id_prefix="guide")
memory = build_memory(provider, [g[1] for g in guidance], [g[0] for g in guidance])
bank = build_prototypes(memory, kmeans(pca_project(pca_fit(memory, 16), memory), 4, seed=0), 4)
trace = pa_attack(provider, images[0], bank, AttackConfig(s1=50, s2=0, seed=0))
stats = attention_shift(trace.weights_per_stage[0], trace.weights_per_stage[1])
print(f"\nafter 50 steps at epsilon 2/255: spearman(w_s1, w_s2) = {stats.spearman:.6f}")
print(f"L1 drift {stats.l1:.5f}, top-{stats.k} overlap {stats.top_k_overlap:.2f}")

# the per-step attention-deviation matrix the run directory exports
dev = trace.attention_deviation
print(f"\nattention deviation matrix {dev.shape}: "
      f"step-0 mean {dev[0].mean():.2e}, step-{dev.shape[0]-1} mean {dev[-1].mean():.2e}")
most_moved = np.argsort(-dev[-1])[:5]
print("tokens that moved most by the last step:", most_moved.tolist())
