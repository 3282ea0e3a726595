"""Token-wise cosine similarity between feature grids.

Every loss and anchor-selection rule in the package reduces two [N, d] grids
to per-token cosines first, so the degenerate-row policy lives here: a token
row with exactly zero norm makes the cosine undefined and raises instead of
silently producing NaN.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateFeatureError, ShapeError


def row_norms(grid: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(grid, axis=-1)
    if np.any(norms == 0.0):
        bad = int(np.argmax(norms == 0.0))
        raise DegenerateFeatureError(f"{what} has a zero-norm token row (index {bad})")
    return norms


def token_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-token cosine between two [N, d] grids -> [N]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"grids must share an [N, d] shape, got {a.shape} vs {b.shape}")
    na = row_norms(a, "first grid")
    nb = row_norms(b, "second grid")
    return (a * b).sum(axis=1) / (na * nb)


def mean_token_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar similarity of two grids: the mean of per-token cosines."""
    return float(token_cosines(a, b).mean())
