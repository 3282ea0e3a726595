"""Desk-scale downstream evaluation for encoder attacks.

Real benchmark scores need full multimodal stacks, so the harness scores
surrogate tasks instead: a linear probe (or nearest-neighbor retrieval) over
mean-pooled patch features. Its outputs are score reduction rates and
diagnostic curves; the claims it can support are orderings and invariants,
not absolute benchmark numbers.

The harness never trusts an attack trace: every adversarial image is
re-checked against the budget ball and pixel range before it is scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .attack import (
    AttackConfig,
    head_mean_patch_attention,
    pa_attack,
    resolve_layer,
    with_overrides,
)
from .errors import ConfigError, ShapeError
from .prototypes import PrototypeBank
from .seeding import derive_seed

PROBE_LEARNING_RATE = 1.0
PROBE_TOL = 1e-6
PROBE_MAX_ITER = 5000
PROBE_L2 = 1e-3  # keeps the probe from memorizing the small fixture sets


class DegenerateLabelsError(ValueError):
    """Fewer than two classes, or a class with fewer than two examples."""


@dataclass(frozen=True)
class SurrogateTask:
    """A frozen scoring rule over patch-token grids.

    ``classification-probe`` applies a trained linear map to standardized
    mean-pooled features; ``retrieval`` scores top-1 label agreement of the
    cosine-nearest gallery item. Training/gallery features always come from
    clean images.
    """

    kind: str
    classes: tuple
    weight: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    feat_mean: np.ndarray | None = field(default=None, repr=False)
    feat_std: np.ndarray | None = field(default=None, repr=False)
    gallery: np.ndarray | None = field(default=None, repr=False)
    gallery_labels: np.ndarray | None = field(default=None, repr=False)

    def score(self, grids: list[np.ndarray], labels) -> float:
        pooled = np.stack([np.asarray(g).mean(axis=0) for g in grids])
        y = np.asarray([self.classes.index(lbl) for lbl in labels])
        if self.kind == "classification-probe":
            logits = ((pooled - self.feat_mean) / self.feat_std) @ self.weight + self.bias
            return float((logits.argmax(axis=1) == y).mean())
        sims = _cosine_matrix(pooled, self.gallery)
        hit = self.gallery_labels[sims.argmax(axis=1)] == y
        return float(hit.mean())


@dataclass(frozen=True)
class SrrReport:
    score_clean: float
    score_adv: float
    srr: float


@dataclass(frozen=True)
class ShiftStats:
    spearman: float
    l1: float
    top_k_overlap: float
    k: int


def pooled_features(provider, images) -> np.ndarray:
    return np.stack([provider.encode(x)[0].patch_tokens.mean(axis=0) for x in images])


def _cosine_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    # zero-norm rows (fully masked inputs) get similarity 0 everywhere
    qs = np.where(qn > 0, queries / np.where(qn > 0, qn, 1.0), 0.0)
    gs = np.where(gn > 0, gallery / np.where(gn > 0, gn, 1.0), 0.0)
    return qs @ gs.T


def _check_labels(labels) -> tuple:
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise DegenerateLabelsError("need at least two classes")
    for c in classes:
        if sum(1 for lbl in labels if lbl == c) < 2:
            raise DegenerateLabelsError(f"class {c!r} has fewer than two examples")
    return classes


def train_probe(provider, labeled, seed: int) -> SurrogateTask:
    """Fit a softmax linear probe on mean-pooled clean features.

    Full-batch gradient descent from a seeded initialization, stopping when
    the loss change drops below 1e-6 (or at the iteration cap). Features are
    standardized by training statistics so the fixed step size is stable.
    """
    images = [img for img, _ in labeled]
    labels = [lbl for _, lbl in labeled]
    classes = _check_labels(labels)
    feats = pooled_features(provider, images)
    y = np.asarray([classes.index(lbl) for lbl in labels])
    mean = feats.mean(axis=0)
    std = np.maximum(feats.std(axis=0), 1e-8)
    x = (feats - mean) / std

    rng = np.random.Generator(np.random.PCG64(seed))
    w = rng.normal(0.0, 0.01, size=(x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    onehot = np.eye(len(classes))[y]
    prev = None
    for _ in range(PROBE_MAX_ITER):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = float(-np.log(p[np.arange(len(y)), y] + 1e-300).mean())
        loss += 0.5 * PROBE_L2 * float((w * w).sum())
        if prev is not None and abs(prev - loss) < PROBE_TOL:
            break
        prev = loss
        g = (p - onehot) / len(y)
        w -= PROBE_LEARNING_RATE * (x.T @ g + PROBE_L2 * w)
        b -= PROBE_LEARNING_RATE * g.sum(axis=0)
    return SurrogateTask(
        kind="classification-probe",
        classes=classes,
        weight=w,
        bias=b,
        feat_mean=mean,
        feat_std=std,
    )


def make_retrieval_task(provider, labeled) -> SurrogateTask:
    images = [img for img, _ in labeled]
    labels = [lbl for _, lbl in labeled]
    classes = _check_labels(labels)
    return SurrogateTask(
        kind="retrieval",
        classes=classes,
        gallery=pooled_features(provider, images),
        gallery_labels=np.asarray([classes.index(lbl) for lbl in labels]),
    )


def srr(score_clean: float, score_adv: float) -> SrrReport:
    """Score reduction rate: 1 - adv/clean."""
    if score_clean <= 0.0:
        raise ConfigError("clean score must be positive")
    if score_adv < 0.0:
        raise ConfigError("adversarial score must be nonnegative")
    return SrrReport(
        score_clean=float(score_clean),
        score_adv=float(score_adv),
        srr=1.0 - float(score_adv) / float(score_clean),
    )


def validate_adversarial(x_clean: np.ndarray, x_adv: np.ndarray, epsilon: float) -> None:
    """Budget and range check on a candidate adversarial image, no tolerance."""
    if x_adv.shape != x_clean.shape:
        raise ShapeError("adversarial image shape differs from clean image")
    gap = float(np.abs(x_adv - x_clean).max())
    if gap > epsilon:
        raise ConfigError(f"adversarial image leaves the budget ball: {gap} > {epsilon}")
    if x_adv.min() < 0.0 or x_adv.max() > 1.0:
        raise ConfigError("adversarial image leaves the [0, 1] pixel range")


def token_mask_experiment(
    provider,
    task: SurrogateTask,
    images,
    labels,
    proportions,
    strategy: str = "random",
    seed: int = 0,
    layer_selector: str | int = "middle",
) -> list[tuple[float, float]]:
    """Score ratio versus unmasked when a share of patch tokens is zeroed.

    ``random`` draws the masked set per image from the seeded generator;
    ``attention-keep-high`` zeroes lowest-attention tokens first, ranked by
    the head-mean class attention at the chosen layer.
    """
    if strategy not in ("random", "attention-keep-high"):
        raise ConfigError(f"unknown masking strategy {strategy!r}")
    grids = []
    orders = []
    layer = resolve_layer(layer_selector, provider.info().layers)
    for x in images:
        features, profile = provider.encode(x)
        grids.append(features.patch_tokens)
        attn = head_mean_patch_attention(profile, layer)
        orders.append(np.argsort(attn, kind="stable"))  # ascending: weakest first
    n_tokens = grids[0].shape[0]
    base = task.score(grids, labels)
    if base <= 0.0:
        raise ConfigError("unmasked task score is zero; ratios are undefined")

    rng = np.random.Generator(np.random.PCG64(seed))
    curve = []
    for rho in proportions:
        if not 0.0 <= rho <= 1.0:
            raise ConfigError(f"mask proportion {rho} outside [0, 1]")
        n_mask = int(round(rho * n_tokens))
        masked = []
        for g, order in zip(grids, orders):
            if n_mask == 0:
                masked.append(g)
                continue
            if strategy == "random":
                idx = rng.permutation(n_tokens)[:n_mask]
            else:
                idx = order[:n_mask]
            mg = g.copy()
            mg[idx] = 0.0
            masked.append(mg)
        curve.append((float(rho), task.score(masked, labels) / base))
    return curve


def _rank_corr(ra: np.ndarray, rb: np.ndarray) -> float:
    if np.array_equal(ra, rb):
        return 1.0
    va = ra - ra.mean()
    vb = rb - rb.mean()
    na = float(np.sqrt((va * va).sum()))
    nb = float(np.sqrt((vb * vb).sum()))
    if na == 0.0 or nb == 0.0:
        # one side constant: correlation undefined, report no association
        return 0.0
    return float((va * vb).sum() / (na * nb))


def attention_shift(w_a: np.ndarray, w_b: np.ndarray, top_k: int | None = None) -> ShiftStats:
    """How much two token-weight vectors reorder: Spearman rank correlation
    with average ranks on ties, L1 distance, and top-k index overlap."""
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if w_a.shape != w_b.shape or w_a.ndim != 1:
        raise ShapeError("weight vectors must share a 1-d shape")
    n = w_a.shape[0]
    if top_k is None:
        top_k = max(1, n // 10)
    if not 1 <= top_k <= n:
        raise ConfigError(f"top_k {top_k} outside [1, {n}]")
    spearman = _rank_corr(rankdata(w_a), rankdata(w_b))
    l1 = float(np.abs(w_a - w_b).sum())
    # stable sort on (-value, index): deterministic under ties
    top_a = set(np.argsort(-w_a, kind="stable")[:top_k].tolist())
    top_b = set(np.argsort(-w_b, kind="stable")[:top_k].tolist())
    return ShiftStats(
        spearman=spearman,
        l1=l1,
        top_k_overlap=len(top_a & top_b) / top_k,
        k=top_k,
    )


def ablation_suite(
    provider,
    bank: PrototypeBank,
    eval_images,
    eval_labels,
    task: SurrogateTask,
    grid: list[dict],
    base_config: AttackConfig,
    seed: int = 0,
) -> list[dict]:
    """One SRR row per grid cell.

    A cell is a dict of AttackConfig overrides (plus optionally
    ``guidance_mode``). Every image in every cell gets its own derived seed;
    adversarial images are re-validated before scoring.
    """
    clean_grids = [provider.encode(x)[0].patch_tokens for x in eval_images]
    score_clean = task.score(clean_grids, eval_labels)
    rows = []
    for ci, cell in enumerate(grid):
        cfg = with_overrides(base_config, **cell)
        adv_grids = []
        for j, x in enumerate(eval_images):
            run_cfg = with_overrides(cfg, seed=derive_seed(seed, f"cell{ci}/img{j}"))
            trace = pa_attack(provider, x, bank, run_cfg)
            validate_adversarial(np.asarray(x, dtype=np.float64), trace.adv_image, cfg.epsilon)
            adv_grids.append(provider.encode(trace.adv_image)[0].patch_tokens)
        report = srr(score_clean, task.score(adv_grids, eval_labels))
        row = dict(cell)
        row.update(
            score_clean=report.score_clean,
            score_adv=report.score_adv,
            srr=report.srr,
        )
        rows.append(row)
    return rows
