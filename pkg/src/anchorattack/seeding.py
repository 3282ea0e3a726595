"""Single-seed discipline: every random component derives its own stream.

A run is governed by one top-level integer seed. Component seeds come from
SHA-256 of ``"<seed>/<component-name>"`` (first 8 digest bytes, little
endian), so adding a component never shifts another component's stream and
the same (seed, name) pair yields the same sub-seed on every platform.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
