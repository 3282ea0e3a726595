"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a PASS line on success; the terminal-summary hook in
conftest repeats one line per criterion including failures, so a red
criterion is visible at a glance. Everything runs at 64-bit precision on
the pinned fixture encoder.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from anchorattack import runio
from anchorattack.attack import (
    AttackConfig,
    objective,
    objective_cotangent,
    pa_attack,
)
from anchorattack.cli import main as cli_main
from anchorattack.encoder import TokenFeatures, fd_gradient_oracle, vjp
from anchorattack.evalharness import (
    ablation_suite,
    attention_shift,
    srr,
    token_mask_experiment,
    train_probe,
)
from anchorattack.prototypes import (
    GuidanceMemory,
    build_prototypes,
    kmeans,
    pca_fit,
    select_anchor,
)
from anchorattack.seeding import derive_seed
from anchorattack.similarity import mean_token_cosine
from anchorattack.synthdata import make_dataset, write_dataset

from baseline_pgd import plain_vision_pgd

GRADIENT_PROBES = 20
GRADIENT_PIXELS = 50
VJP_TOL = 1e-4
COTANGENT_TOL = 1e-5

# regression fixture: Spearman(w_s1, w_s2) on the fixture image after the
# 50-step first stage (pinned encoder seed 26, default attack preset)
RECORDED_STAGE_SPEARMAN = 0.9946886446886445


def _passed(name: str):
    print(f"\nACCEPTANCE {name}: PASS", flush=True)


def _rel_err(a, b, floor):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


# -- 1. gradient correctness ------------------------------------------------------


def test_acceptance_gradient_correctness(micro_encoder, provider):
    start = time.time()
    rng = np.random.default_rng(2024)
    assert micro_encoder.dtype == np.float64

    worst_vjp = 0.0
    for _ in range(GRADIENT_PROBES):
        x = rng.uniform(0.05, 0.95, size=(3, 32, 32))
        cot_p = rng.normal(size=(64, 32))
        cot_p /= np.linalg.norm(cot_p)
        cot_c = rng.normal(size=32)
        cot_c /= np.linalg.norm(cot_c)
        grad = vjp(micro_encoder, x, cot_p, cot_c)

        def lossfn(f, cp=cot_p, cc=cot_c):
            return float((f.patch_tokens * cp).sum() + (f.class_token * cc).sum())

        idx = rng.choice(x.size, size=GRADIENT_PIXELS, replace=False)
        fd = fd_gradient_oracle(micro_encoder, x, lossfn, h=1e-4, pixel_indices=idx)
        worst_vjp = max(worst_vjp, _rel_err(grad.reshape(-1)[idx], fd.reshape(-1)[idx], 1e-4))
    assert worst_vjp <= VJP_TOL, f"vjp vs finite differences: {worst_vjp}"

    worst_cot = 0.0
    for _ in range(GRADIENT_PROBES):
        n, d = 16, 8
        a = rng.normal(size=(n, d))
        u = rng.normal(size=(n, d)) * 0.5 + rng.choice([-2.0, 2.0], size=(n, 1))
        p = rng.normal(size=(n, d))
        w = rng.uniform(0.05, 1.0, size=n)
        w /= w.sum()
        lam = float(rng.uniform(0.0, 2.0))
        va, vu = TokenFeatures(a, np.zeros(d)), TokenFeatures(u, np.zeros(d))
        cot_p, _ = objective_cotangent(va, vu, p, w, lam)
        h = 1e-6
        fd = np.zeros_like(u)
        for j in range(n):
            for c in range(d):
                up, um = u.copy(), u.copy()
                up[j, c] += h
                um[j, c] -= h
                fd[j, c] = (
                    objective(va, TokenFeatures(up, np.zeros(d)), p, w, lam).objective
                    - objective(va, TokenFeatures(um, np.zeros(d)), p, w, lam).objective
                ) / (2 * h)
        worst_cot = max(worst_cot, _rel_err(cot_p, fd, 1e-5))
    assert worst_cot <= COTANGENT_TOL, f"cotangent vs finite differences: {worst_cot}"

    elapsed = time.time() - start
    assert elapsed < 120.0, f"gradient checks took {elapsed:.1f}s"
    _passed(f"gradient-correctness (vjp {worst_vjp:.2e}, cotangent {worst_cot:.2e}, {elapsed:.1f}s)")


# -- 2. feasibility ----------------------------------------------------------------


def test_acceptance_feasibility(provider, bank, eval_set):
    # a spread of budgets, step sizes and random starts; every recorded step
    # and the final image must satisfy the constraints with zero tolerance
    configs = [
        AttackConfig(epsilon=2 / 255, alpha=1 / 255, s1=6, s2=6, seed=1),
        AttackConfig(epsilon=4 / 255, alpha=1 / 255, s1=5, s2=5, seed=2, eta=2 / 255),
        AttackConfig(epsilon=8 / 255, alpha=2 / 255, s1=4, s2=4, seed=3),
        AttackConfig(epsilon=16 / 255, alpha=4 / 255, s1=3, s2=3, seed=4, eta=0.0),
    ]
    checked = 0
    for config in configs:
        for _, image, _ in eval_set[:3]:
            clean = np.asarray(image, dtype=np.float64)
            trace = pa_attack(provider, clean, bank, config)
            for record in trace.per_step:
                assert record.linf <= config.epsilon  # exact
            adv = trace.adv_image
            assert float(np.abs(adv - clean).max()) <= config.epsilon
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            checked += len(trace.per_step)
    _passed(f"feasibility ({checked} steps checked exactly)")


# -- 3. SRR arithmetic vs reported values --------------------------------------------


def test_acceptance_srr_arithmetic():
    first = srr(115.5, 6.1).srr
    second = srr(77.5, 4.7).srr
    assert first == pytest.approx(0.9472, abs=5e-5)
    assert second == pytest.approx(0.9394, abs=5e-5)
    _passed(f"srr-arithmetic ({first:.6f}, {second:.6f})")


# -- 4. prototype pipeline oracles ----------------------------------------------------


def test_acceptance_prototype_oracles():
    start = time.time()
    rng = np.random.default_rng(7)

    # k-means equals the brute-force optimal bipartition of the 4-point set
    points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    assign = kmeans(points, 2, seed=0)
    groups = {frozenset(np.flatnonzero(assign == c).tolist()) for c in (0, 1)}
    assert groups == {frozenset({0, 1}), frozenset({2, 3})}

    # PCA vs dense covariance eigendecomposition, principal angles <= 1e-8
    # (sine form: accurate for tiny angles where arccos loses precision)
    scales = np.array([8.0, 5.0, 3.0, 2.0, 1.2, 0.7, 0.4, 0.2]).reshape(2, 4)
    stack = rng.normal(size=(24, 2, 4)) * scales
    memory = GuidanceMemory(entries=list(stack), source_ids=[f"g{i}" for i in range(24)])
    model = pca_fit(memory, 3)
    flat = stack.reshape(24, 8)
    centered = flat - flat.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered / 23.0)
    basis = evecs[:, ::-1][:, :3]
    q = model.components.T  # orthonormal columns spanning the PCA subspace
    residual = basis - q @ (q.T @ basis)
    sin_angles = np.linalg.svd(residual, compute_uv=False)
    assert float(sin_angles.max()) <= 1e-8
    np.testing.assert_allclose(model.explained_variance, evals[::-1][:3], rtol=1e-10)

    # prototypes equal direct means to 1e-12
    assignments = rng.integers(0, 3, size=24)
    for c in range(3):  # ensure non-empty
        assignments[c] = c
    bank = build_prototypes(memory, assignments, 3)
    for c in range(3):
        direct = stack[assignments == c].mean(axis=0)
        assert float(np.abs(bank.prototypes[c] - direct).max()) <= 1e-12

    # anchor selection equals the exhaustive argmin on banks of size <= 8
    for k in (2, 4, 8):
        grids = rng.normal(size=(k, 5, 6))
        small = GuidanceMemory(entries=list(grids), source_ids=[f"s{i}" for i in range(k)])
        b = build_prototypes(small, np.arange(k), k)
        v = TokenFeatures(rng.normal(size=(5, 6)), np.zeros(6))
        _, idx = select_anchor(b, v)
        sims = [mean_token_cosine(v.patch_tokens, g) for g in b.prototypes]
        assert idx == int(np.argmin(sims))

    elapsed = time.time() - start
    assert elapsed < 60.0
    _passed(f"prototype-oracles ({elapsed:.2f}s)")


# -- 5. ablation reduction to plain PGD ------------------------------------------------


def test_acceptance_ablation_reduction(provider, bank):
    from anchorattack.synthdata import generate_image

    for seed in (0, 1, 2):
        image = generate_image(seed % 4, seed=4000 + seed)
        config = AttackConfig(
            epsilon=8 / 255,
            alpha=2 / 255,
            s1=10,
            s2=0,
            stages=1,
            eta=0.0,
            guidance_weight=0.0,
            use_attention=False,
            seed=seed,
        )
        trace = pa_attack(provider, image, bank, config)
        base_img, base_records = plain_vision_pgd(provider, image, 10, 8 / 255, 2 / 255)
        assert trace.adv_image.tobytes() == base_img.tobytes(), f"seed {seed}: images differ"
        assert len(trace.per_step) == 10
        for record, (objective_value, linf) in zip(trace.per_step, base_records):
            assert record.loss.objective == objective_value
            assert record.linf == linf
    _passed("ablation-reduction (bit-identical over 10 steps x 3 seeds)")


# -- 6. directional orderings -----------------------------------------------------------


def test_acceptance_directional_orderings(provider, bank, fixture_task, eval_set):
    start = time.time()
    images = [img for _, img, _ in eval_set]
    labels = [lbl for _, _, lbl in eval_set]
    base = AttackConfig(epsilon=8 / 255, alpha=2 / 255, s1=10, s2=20, stages=2, seed=0)
    grid = [
        {},  # full attack, 30 steps
        {"guidance_weight": 0.0, "use_attention": False, "stages": 1, "s1": 30, "eta": 0.0},
        {"guidance_mode": "nearest_sample"},
        {"guidance_mode": "farthest_prototype"},
    ]
    full, plain, nearest, farthest = [], [], [], []
    for seed in range(5):
        rows = ablation_suite(provider, bank, images, labels, fixture_task, grid, base, seed=seed)
        full.append(rows[0]["srr"])
        plain.append(rows[1]["srr"])
        nearest.append(rows[2]["srr"])
        farthest.append(rows[3]["srr"])
    assert np.mean(full) >= np.mean(plain), (full, plain)
    assert np.mean(nearest) <= np.mean(farthest), (nearest, farthest)

    keep, rand = [], []
    for seed in range(5):
        keep.append(
            token_mask_experiment(
                provider, fixture_task, images, labels, [0.5], "attention-keep-high", seed=seed
            )[0][1]
        )
        rand.append(
            token_mask_experiment(
                provider, fixture_task, images, labels, [0.5], "random", seed=seed
            )[0][1]
        )
    assert np.mean(keep) >= np.mean(rand), (keep, rand)

    elapsed = time.time() - start
    assert elapsed < 900.0, f"orderings took {elapsed:.0f}s"
    _passed(
        "directional-orderings "
        f"(full {np.mean(full):.3f} >= plain {np.mean(plain):.3f}; "
        f"nearest {np.mean(nearest):.3f} <= farthest {np.mean(farthest):.3f}; "
        f"keep-high {np.mean(keep):.3f} >= random {np.mean(rand):.3f}; {elapsed:.0f}s)"
    )


# -- 7. attention refresh -----------------------------------------------------------------


def test_acceptance_attention_refresh(provider, bank, fixture_image):
    config = AttackConfig(s1=50, s2=0, seed=0)  # paper-default budget and step
    trace = pa_attack(provider, fixture_image, bank, config)
    assert len(trace.weights_per_stage) == 2
    stats = attention_shift(trace.weights_per_stage[0], trace.weights_per_stage[1])
    assert stats.spearman < 1.0
    assert stats.spearman == pytest.approx(RECORDED_STAGE_SPEARMAN, abs=1e-12)
    _passed(f"attention-refresh (spearman {stats.spearman:.12f} < 1)")


# -- 8. CLI determinism ---------------------------------------------------------------------


def _run_cli_pipeline(root: Path, tag: str, seed: int) -> Path:
    config = runio.default_config()
    config["attack"].update(epsilon=8 / 255, alpha=2 / 255, s1=3, s2=3)
    config["prototype"].update(m=16, width=8, k=4)
    config["eval"].update(train_dir=str(root / "train"), proportions=[0.0, 0.5])
    config_path = root / "config.json"
    runio.save_config(config_path, config)

    bank = root / "bank.abk"
    run = root / tag
    args = ["--config", str(config_path), "--seed", str(seed)]
    assert cli_main(["build-prototypes", *args, "--guidance-dir", str(root / "guide"),
                     "--out", str(bank)]) == 0
    assert cli_main(["attack", *args, "--bank", str(bank),
                     "--input-dir", str(root / "eval"), "--out", str(run)]) == 0
    assert cli_main(["evaluate", *args, "--run", str(run)]) == 0
    assert cli_main(["diagnose", *args, "--run", str(run)]) == 0
    return run


def test_acceptance_cli_determinism(tmp_path):
    write_dataset(tmp_path / "guide", 16, seed=100, id_prefix="guide")
    write_dataset(tmp_path / "train", 32, seed=102, id_prefix="train")
    write_dataset(tmp_path / "eval", 4, seed=103, id_prefix="eval")
    run_a = _run_cli_pipeline(tmp_path, "run_a", seed=17)
    run_b = _run_cli_pipeline(tmp_path, "run_b", seed=17)

    digests = []
    for run in (run_a, run_b):
        tree = {}
        for path in sorted(run.rglob("*")):
            if path.is_file():
                tree[str(path.relative_to(run))] = hashlib.sha256(path.read_bytes()).hexdigest()
        digests.append(tree)
    assert digests[0] == digests[1]
    _passed(f"cli-determinism ({len(digests[0])} files byte-identical)")
