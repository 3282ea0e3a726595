#!/usr/bin/env python3
"""Attacking through the wire protocol.

Starts a loopback TCP server over the reference encoder, connects the
remote provider, and runs the same attack through it. Any encoder service
that speaks this protocol (hello/info/encode/vjp with length-prefixed JSON
frames and base64 float32 tensors) can be attacked the same way.
"""

import numpy as np

from anchorattack import (
    AttackConfig,
    EncoderConfig,
    LocalEncoderProvider,
    TcpEncoderServer,
    build_memory,
    build_prototypes,
    connect_tcp,
    init_encoder,
    kmeans,
    pa_attack,
    pca_fit,
    pca_project,
)
from anchorattack.synthdata import make_dataset

local = LocalEncoderProvider(init_encoder(EncoderConfig(seed=26)))

guidance = make_dataset(64, seed=100, id_prefix="guide")
memory = build_memory(local, [g[1] for g in guidance], [g[0] for g in guidance])
bank = build_prototypes(memory, kmeans(pca_project(pca_fit(memory, 16), memory), 4, seed=0), 4)
image = make_dataset(1, seed=103, id_prefix="eval")[0][1]
config = AttackConfig(epsilon=8 / 255, alpha=2 / 255, s1=4, s2=4, seed=5)

with TcpEncoderServer(local, port=0) as server:
    print(f"loopback server on {server.host}:{server.port}")
    remote = connect_tcp(server.host, server.port)
    info = remote.info()
    print(f"remote encoder: N={info.n} d={info.d} layers={info.layers} "
          f"provider={info.provider_id!r}")

    local_trace = pa_attack(local, image, bank, config)
    remote_trace = pa_attack(remote, image, bank, config)
    remote.close()

gap = float(np.abs(local_trace.adv_image - remote_trace.adv_image).max())
print(f"\nsame attack, both providers: max image difference {gap:.2e} "
      "(float32 wire precision)")
print(f"local final objective  {local_trace.per_step[-1].loss.objective:+.6f}")
print(f"remote final objective {remote_trace.per_step[-1].loss.objective:+.6f}")
print("identical anchor choice:", local_trace.anchor_index == remote_trace.anchor_index)
