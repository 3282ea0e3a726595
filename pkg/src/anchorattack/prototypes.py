"""Guidance feature memory, dimensionality reduction, clustering and anchors.

The pipeline: encode a guidance image set into a feature memory, project the
flattened grids with PCA for clustering only, run deterministic Lloyd
k-means on the projected points, then average each cluster's members in the
original [N, d] space to form prototypes. At attack time the anchor for an
image is chosen from the bank by mean per-token cosine against the image's
clean features.

Clustering operates on projected coordinates; prototype values never do.
PCA here is an assignment device, not a compression of the anchors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import TokenFeatures
from .errors import ConfigError, DegenerateMemoryError, DisjointnessError, ShapeError
from .similarity import mean_token_cosine

log = logging.getLogger(__name__)

GUIDANCE_MODES = (
    "farthest_prototype",
    "nearest_prototype",
    "farthest_sample",
    "nearest_sample",
    "mean_sample",
)

KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class GuidanceMemory:
    """Patch-token grids of the guidance images, in input order."""

    entries: list[np.ndarray]  # m grids, each [N, d]
    source_ids: list[str]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # [N*d]
    components: np.ndarray  # [w, N*d], orthonormal rows
    explained_variance: np.ndarray  # [w], non-increasing

    @property
    def width(self) -> int:
        return self.components.shape[0]


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: np.ndarray  # [K, N, d], raw-space cluster means
    assignments: np.ndarray  # [m], cluster index per memory entry (0-based)
    cluster_sizes: np.ndarray  # [K]
    mode: str
    samples: np.ndarray | None = field(default=None, repr=False)  # [m, N, d]
    global_mean: np.ndarray | None = None  # [N, d]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.prototypes.shape[1], self.prototypes.shape[2]


def build_memory(provider, guidance_images, source_ids, eval_ids=()) -> GuidanceMemory:
    """Encode guidance images into a feature memory.

    ``eval_ids`` is the identifier set of the images that will later be
    attacked; any overlap with the guidance ids is rejected so the bank can
    never leak evaluation content.
    """
    source_ids = [str(s) for s in source_ids]
    if len(source_ids) != len(guidance_images):
        raise ShapeError("one source id per guidance image required")
    overlap = set(source_ids) & set(str(s) for s in eval_ids)
    if overlap:
        raise DisjointnessError(
            f"guidance ids overlap evaluation ids: {sorted(overlap)[:5]}"
        )
    entries = [provider.encode(img)[0].patch_tokens.copy() for img in guidance_images]
    return GuidanceMemory(entries=entries, source_ids=source_ids)


def pca_fit(memory: GuidanceMemory, width: int) -> PcaModel:
    """Top-``width`` principal directions of the mean-centered flat grids.

    Components come from an SVD of the centered [m, N*d] matrix; each row's
    sign is fixed by making its largest-magnitude entry positive (lowest
    index on ties) so the model is reproducible.
    """
    if len(memory) == 0:
        raise ConfigError("empty guidance memory")
    flat = np.stack([np.asarray(e, dtype=np.float64).reshape(-1) for e in memory.entries])
    m, dim = flat.shape
    if not 1 <= width <= min(m, dim):
        raise ConfigError(f"PCA width {width} outside [1, {min(m, dim)}]")
    mean = flat.mean(axis=0)
    centered = flat - mean
    scale = max(1.0, float(np.abs(flat).max()))
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[0] <= 1e-12 * scale:
        raise DegenerateMemoryError("all guidance features identical: zero variance")
    components = vt[:width].copy()
    for row in components:
        lead = int(np.argmax(np.abs(row)))
        if row[lead] < 0:
            row *= -1.0
    denom = max(m - 1, 1)
    variance = (svals[:width] ** 2) / denom
    return PcaModel(mean=mean, components=components, explained_variance=variance)


def pca_project(model: PcaModel, memory: GuidanceMemory) -> np.ndarray:
    flat = np.stack([np.asarray(e, dtype=np.float64).reshape(-1) for e in memory.entries])
    return (flat - model.mean) @ model.components.T


def clamp_pca_width(width: int, m: int, flat_dim: int) -> int:
    """One pipeline across scales: shrink the requested width when the
    memory cannot support it."""
    limit = min(m, flat_dim)
    if width > limit:
        log.warning("PCA width %d clamped to %d (m=%d, flat dim=%d)", width, limit, m, flat_dim)
        return limit
    return width


def _sse(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = points - centroids[assign]
    return float((diff * diff).sum())


def kmeans(
    projected: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = KMEANS_MAX_ITER,
    sse_trace: list | None = None,
) -> np.ndarray:
    """Deterministic Lloyd iterations, returning a cluster index per row.

    Initialization is greedy farthest-point: the seeded generator picks the
    first centroid, each next centroid is the point farthest from the ones
    already chosen (lowest index on ties). Iterations stop at an assignment
    fixpoint or after ``max_iter`` rounds. A cluster that comes out empty is
    repaired by re-seeding it with the point currently farthest from its own
    centroid.
    """
    points = np.asarray(projected, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"expected [m, w] points, got shape {points.shape}")
    m = points.shape[0]
    if k < 1 or k > m:
        raise ConfigError(f"cluster count {k} outside [1, {m}]")

    rng = np.random.Generator(np.random.PCG64(seed))
    first = int(rng.integers(m))
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[first]
    nearest_sq = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        pick = int(np.argmax(nearest_sq))
        centroids[c] = points[pick]
        nearest_sq = np.minimum(nearest_sq, ((points - centroids[c]) ** 2).sum(axis=1))

    assign = None
    for _ in range(max_iter):
        dist_sq = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist_sq.argmin(axis=1)
        own = dist_sq[np.arange(m), new_assign]
        for c in range(k):
            if not np.any(new_assign == c):
                far = int(np.argmax(own))
                new_assign[far] = c
                own[far] = 0.0
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            centroids[c] = points[assign == c].mean(axis=0)
        if sse_trace is not None:
            sse_trace.append(_sse(points, centroids, assign))
    return assign


def build_prototypes(
    memory: GuidanceMemory,
    assignments: np.ndarray,
    k: int,
    mode: str = "farthest_prototype",
    keep_samples: bool | None = None,
) -> PrototypeBank:
    """Average each cluster's members in raw [N, d] space.

    ``keep_samples`` controls whether the raw memory entries ride along in
    the bank; sample-scanning guidance modes need them and enable this by
    default.
    """
    if mode not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance mode {mode!r}, expected one of {GUIDANCE_MODES}")
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (len(memory),):
        raise ShapeError("one assignment per memory entry required")
    if assignments.min() < 0 or assignments.max() >= k:
        raise ConfigError("assignment index outside [0, K)")

    stack = np.stack([np.asarray(e, dtype=np.float64) for e in memory.entries])
    sizes = np.bincount(assignments, minlength=k)
    if np.any(sizes == 0):
        empty = int(np.argmax(sizes == 0))
        raise ConfigError(f"cluster {empty} is empty; run kmeans with repair enabled")
    prototypes = np.stack([stack[assignments == c].mean(axis=0) for c in range(k)])

    if keep_samples is None:
        keep_samples = mode in ("farthest_sample", "nearest_sample")
    return PrototypeBank(
        prototypes=prototypes,
        assignments=assignments,
        cluster_sizes=sizes,
        mode=mode,
        samples=stack if keep_samples else None,
        global_mean=stack.mean(axis=0),
    )


def select_anchor(
    bank: PrototypeBank, features: TokenFeatures, mode: str | None = None
) -> tuple[np.ndarray, int]:
    """Pick the guidance anchor for one image's clean features.

    Similarity is the mean per-token cosine. ``farthest_*`` modes take the
    argmin, ``nearest_*`` the argmax; the ``*_sample`` variants scan the
    stored raw memory entries instead of the cluster means, and
    ``mean_sample`` returns the global memory mean with index -1. Ties go to
    the lowest index.
    """
    mode = mode or bank.mode
    if mode not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance mode {mode!r}")
    grid = features.patch_tokens
    if grid.shape != bank.prototypes.shape[1:]:
        raise ShapeError(
            f"feature grid {grid.shape} does not match bank grid {bank.prototypes.shape[1:]}"
        )

    if mode == "mean_sample":
        if bank.global_mean is None:
            raise ConfigError("bank was built without a global mean")
        return bank.global_mean.copy(), -1

    if mode.endswith("_sample"):
        if bank.samples is None:
            raise ConfigError(f"mode {mode!r} needs a bank built with keep_samples=True")
        pool = bank.samples
    else:
        pool = bank.prototypes

    sims = np.array([mean_token_cosine(grid, candidate) for candidate in pool])
    idx = int(np.argmin(sims) if mode.startswith("farthest") else np.argmax(sims))
    return pool[idx].copy(), idx
