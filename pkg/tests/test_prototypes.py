from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorattack.encoder import TokenFeatures
from anchorattack.errors import (
    ConfigError,
    DegenerateFeatureError,
    DegenerateMemoryError,
    DisjointnessError,
)
from anchorattack.prototypes import (
    GuidanceMemory,
    build_memory,
    build_prototypes,
    clamp_pca_width,
    kmeans,
    pca_fit,
    pca_project,
    select_anchor,
)


def _memory_from(stack):
    return GuidanceMemory(
        entries=[g for g in stack], source_ids=[f"m{i}" for i in range(len(stack))]
    )


# -- memory -------------------------------------------------------------------


def test_build_memory_shapes_and_order(provider, guidance_set):
    images = [img for _, img, _ in guidance_set[:5]]
    ids = [image_id for image_id, _, _ in guidance_set[:5]]
    memory = build_memory(provider, images, ids)
    assert len(memory) == 5
    assert memory.source_ids == ids
    expected = provider.encode(images[2])[0].patch_tokens
    assert memory.entries[2].tobytes() == expected.tobytes()


def test_build_memory_disjointness(provider, guidance_set):
    images = [img for _, img, _ in guidance_set[:3]]
    ids = [image_id for image_id, _, _ in guidance_set[:3]]
    with pytest.raises(DisjointnessError):
        build_memory(provider, images, ids, eval_ids={ids[1]})


def test_build_memory_deterministic(provider, guidance_set):
    images = [img for _, img, _ in guidance_set[:4]]
    ids = [image_id for image_id, _, _ in guidance_set[:4]]
    m1 = build_memory(provider, images, ids)
    m2 = build_memory(provider, images, ids)
    for a, b in zip(m1.entries, m2.entries):
        assert a.tobytes() == b.tobytes()


# -- PCA ----------------------------------------------------------------------


def test_pca_rank_one_line():
    # points on a 1-d line embedded in R^2 (N=1 token, d=2)
    t = np.linspace(-2, 2, 9)
    stack = np.stack([np.array([[v, 2.0 * v]]) for v in t])
    model = pca_fit(_memory_from(stack), 2)
    total = model.explained_variance.sum()
    assert model.explained_variance[0] / total == pytest.approx(1.0, abs=1e-9)


def test_pca_centering_rank_limit(rng):
    # w = m with m < N*d: centering leaves at most m-1 nonzero variances
    stack = rng.normal(size=(5, 3, 4))
    model = pca_fit(_memory_from(stack), 5)
    assert model.explained_variance[-1] == pytest.approx(0.0, abs=1e-20)
    assert np.all(np.diff(model.explained_variance) <= 1e-12)


def test_pca_orthonormal_components(rng):
    stack = rng.normal(size=(20, 2, 4))
    model = pca_fit(_memory_from(stack), 6)
    gram = model.components @ model.components.T
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-8)


def test_pca_matches_covariance_eigendecomposition(rng):
    # dense covariance eigensolver as the independent oracle; scaled columns
    # keep the eigengaps healthy so subspace angles are well conditioned
    stack = rng.normal(size=(20, 2, 4)) * np.array([8.0, 5.0, 3.0, 2.0, 1.2, 0.7, 0.4, 0.2]).reshape(2, 4)
    flat = stack.reshape(20, 8)
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / (20 - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]

    w = 3
    model = pca_fit(_memory_from(stack), w)
    np.testing.assert_allclose(model.explained_variance, evals[:w], rtol=1e-10)
    # compare subspaces via principal angles (sine form), not signed vectors
    q = model.components.T
    residual = evecs[:, :w] - q @ (q.T @ evecs[:, :w])
    assert float(np.linalg.svd(residual, compute_uv=False).max()) <= 1e-8


def test_pca_reconstruction_is_optimal(rng):
    # projector onto top-w components beats any other rank-w eigen-subspace
    stack = rng.normal(size=(20, 2, 4))
    flat = stack.reshape(20, 8)
    centered = flat - flat.mean(axis=0)
    model = pca_fit(_memory_from(stack), 3)
    proj = model.components
    best = np.linalg.norm(centered - centered @ proj.T @ proj) ** 2

    cov = centered.T @ centered
    _, evecs = np.linalg.eigh(cov)
    for pick in combinations(range(8), 3):
        basis = evecs[:, list(pick)].T
        err = np.linalg.norm(centered - centered @ basis.T @ basis) ** 2
        assert best <= err + 1e-9


def test_pca_sign_convention_deterministic(rng):
    stack = rng.normal(size=(12, 2, 3))
    m1 = pca_fit(_memory_from(stack), 4)
    m2 = pca_fit(_memory_from(stack.copy()), 4)
    assert m1.components.tobytes() == m2.components.tobytes()
    for row in m1.components:
        lead = int(np.argmax(np.abs(row)))
        assert row[lead] > 0


def test_pca_width_validation(rng):
    memory = _memory_from(rng.normal(size=(5, 2, 3)))
    with pytest.raises(ConfigError):
        pca_fit(memory, 0)
    with pytest.raises(ConfigError):
        pca_fit(memory, 6)  # > m
    assert clamp_pca_width(100, 5, 6) == 5
    assert clamp_pca_width(3, 5, 6) == 3


def test_pca_degenerate_memory():
    stack = np.ones((6, 2, 3)) * 0.25
    with pytest.raises(DegenerateMemoryError):
        pca_fit(_memory_from(stack), 2)


# -- k-means ------------------------------------------------------------------

FOUR_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])


def _brute_force_bipartition(points):
    best, best_sse = None, np.inf
    m = len(points)
    for size in range(1, m // 2 + 1):
        for left in combinations(range(m), size):
            right = tuple(i for i in range(m) if i not in left)
            sse = 0.0
            for group in (left, right):
                mu = points[list(group)].mean(axis=0)
                sse += ((points[list(group)] - mu) ** 2).sum()
            if sse < best_sse:
                best, best_sse = (set(left), set(right)), sse
    return best


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_kmeans_four_point_fixture(seed):
    assign = kmeans(FOUR_POINTS, 2, seed=seed)
    groups = {frozenset(np.flatnonzero(assign == c).tolist()) for c in (0, 1)}
    optimal = _brute_force_bipartition(FOUR_POINTS)
    assert groups == {frozenset(optimal[0]), frozenset(optimal[1])}


def test_kmeans_k_equals_m(rng):
    points = rng.normal(size=(6, 3))
    assign = kmeans(points, 6, seed=0)
    assert sorted(assign.tolist()) == list(range(6))
    centroids = np.stack([points[assign == c].mean(axis=0) for c in range(6)])
    sse = ((points - centroids[assign]) ** 2).sum()
    assert sse == pytest.approx(0.0, abs=1e-20)


def test_kmeans_identical_points_repair():
    points = np.ones((5, 2))
    assign = kmeans(points, 2, seed=3)
    assert set(assign.tolist()) == {0, 1}
    assert ((points - points[0]) ** 2).sum() == 0.0


def test_kmeans_rejects_k_above_m():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((3, 2)), 4, seed=0)


def test_kmeans_deterministic(rng):
    points = rng.normal(size=(30, 4))
    a = kmeans(points, 5, seed=9)
    b = kmeans(points, 5, seed=9)
    assert np.array_equal(a, b)


@settings(deadline=None, max_examples=25)
@given(
    m=st.integers(min_value=4, max_value=24),
    k=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_kmeans_partitions_and_sse_monotone(m, k, seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(m, 3))
    trace: list = []
    assign = kmeans(points, min(k, m), seed=seed, sse_trace=trace)
    counts = np.bincount(assign, minlength=min(k, m))
    assert counts.sum() == m
    assert np.all(counts >= 1)
    assert np.all(np.diff(trace) <= 1e-9)


# -- prototypes ---------------------------------------------------------------


def test_prototype_singleton_and_pair(rng):
    stack = rng.normal(size=(3, 2, 4))
    bank = build_prototypes(_memory_from(stack), np.array([0, 1, 1]), 2)
    assert bank.prototypes[0].tobytes() == stack[0].tobytes()
    np.testing.assert_allclose(bank.prototypes[1], (stack[1] + stack[2]) / 2.0, atol=0)


def test_prototype_mean_oracle(rng):
    stack = rng.normal(size=(6, 3, 5))
    assign = np.array([0, 0, 0, 0, 0, 0])
    bank = build_prototypes(_memory_from(stack), assign, 1)
    brute = sum(stack[i] for i in range(6)) / 6.0
    np.testing.assert_allclose(bank.prototypes[0], brute, atol=1e-12)


def test_prototypes_average_raw_space_while_clusters_use_projection(rng, provider, guidance_set):
    # assignment comes from the projected coordinates, values from raw grids
    images = [img for _, img, _ in guidance_set[:12]]
    ids = [image_id for image_id, _, _ in guidance_set[:12]]
    memory = build_memory(provider, images, ids)
    model = pca_fit(memory, 4)
    projected = pca_project(model, memory)
    assert projected.shape == (12, 4)
    assign = kmeans(projected, 3, seed=1)
    bank = build_prototypes(memory, assign, 3)
    stack = np.stack(memory.entries)
    for c in range(3):
        np.testing.assert_allclose(bank.prototypes[c], stack[assign == c].mean(axis=0), atol=1e-9)


def test_empty_cluster_rejected(rng):
    stack = rng.normal(size=(4, 2, 3))
    with pytest.raises(ConfigError):
        build_prototypes(_memory_from(stack), np.array([0, 0, 0, 0]), 2)


# -- anchor selection ---------------------------------------------------------


def _features(grid):
    return TokenFeatures(patch_tokens=grid, class_token=np.zeros(grid.shape[1]))


def _bank_of(prototypes, mode, samples=None):
    k = len(prototypes)
    m = len(samples) if samples is not None else k
    return build_prototypes(
        _memory_from(samples if samples is not None else prototypes),
        np.arange(m) % k,
        k,
        mode,
        keep_samples=True,
    )


def test_anchor_opposite_prototypes(rng):
    v = rng.normal(size=(4, 6))
    bank = _bank_of(np.stack([v, -v]), "farthest_prototype")
    anchor, idx = select_anchor(bank, _features(v))
    assert idx == 1
    np.testing.assert_allclose(anchor, -v)
    _, idx_near = select_anchor(bank, _features(v), mode="nearest_prototype")
    assert idx_near == 0


def test_anchor_matches_exhaustive_scan(rng):
    from anchorattack.similarity import mean_token_cosine

    grids = rng.normal(size=(4, 5, 7))
    v = rng.normal(size=(5, 7))
    bank = _bank_of(grids, "farthest_prototype")
    _, idx = select_anchor(bank, _features(v))
    sims = [mean_token_cosine(v, g) for g in bank.prototypes]
    assert idx == int(np.argmin(sims))


def test_anchor_sample_modes(rng):
    samples = rng.normal(size=(6, 3, 4))
    v = samples[2]
    bank = _bank_of(samples[:2], "nearest_sample", samples=samples)
    anchor, idx = select_anchor(bank, _features(v))
    assert idx == 2  # a sample identical to v has cosine 1 with itself
    np.testing.assert_allclose(anchor, samples[2])
    _, far_idx = select_anchor(bank, _features(v), mode="farthest_sample")
    assert far_idx != 2


def test_anchor_mean_sample(rng):
    samples = rng.normal(size=(5, 3, 4))
    bank = _bank_of(samples[:2], "mean_sample", samples=samples)
    anchor, idx = select_anchor(bank, _features(rng.normal(size=(3, 4))))
    assert idx == -1
    np.testing.assert_allclose(anchor, samples.mean(axis=0), atol=1e-12)


@settings(deadline=None, max_examples=20)
@given(scale=st.floats(min_value=1e-3, max_value=1e3), seed=st.integers(0, 2**16))
def test_anchor_invariant_to_token_rescaling(scale, seed):
    rng = np.random.default_rng(seed)
    grids = rng.normal(size=(5, 4, 6))
    v = rng.normal(size=(4, 6))
    bank = _bank_of(grids, "farthest_prototype")
    _, idx = select_anchor(bank, _features(v))
    _, idx_scaled = select_anchor(bank, _features(v * scale))
    assert idx == idx_scaled


def test_anchor_zero_norm_row_rejected(rng):
    grids = rng.normal(size=(2, 3, 4))
    bank = _bank_of(grids, "farthest_prototype")
    v = rng.normal(size=(3, 4))
    v[1] = 0.0
    with pytest.raises(DegenerateFeatureError):
        select_anchor(bank, _features(v))
