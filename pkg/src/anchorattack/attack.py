"""Two-stage attention-weighted sign-gradient attack on encoder features.

The objective is the ascended quantity

    sum_j w_j * [ -cos(v_j, v'_j) + lambda * cos(v'_j, p_j) ] / N

where v are clean patch-token features, v' adversarial ones, p the selected
anchor grid and w temperature-softmax attention weights. Each step encodes
the current iterate, backpropagates the objective's analytic cotangent
through the provider's VJP, moves every pixel by alpha times the gradient
sign, and projects back into the intersection of the L-inf budget ball and
the valid pixel range.

Feasibility is enforced exactly, not to a tolerance: the per-pixel clip
bounds are nudged by ulps until the *measured* float distance to the clean
image stays within epsilon, so `abs(adv - clean).max() <= epsilon` holds as
written for every produced iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import AttentionProfile, TokenFeatures
from .errors import ConfigError, ShapeError
from .prototypes import GUIDANCE_MODES, PrototypeBank, select_anchor
from .similarity import row_norms, token_cosines


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 2.0 / 255.0
    alpha: float = 1.0 / 255.0
    s1: int = 50
    s2: int = 100
    guidance_weight: float = 1.0  # lambda balancing the anchor term
    temperature: float = 1.0 / 20.0
    layer_selector: str | int = "middle"
    eta: float | None = None  # random-start half-range; None means epsilon
    seed: int = 0
    guidance_mode: str | None = None  # None defers to the bank's own mode
    stages: int = 2
    use_attention: bool = True  # False freezes uniform weights 1/N
    record_deviation: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= self.epsilon <= 1.0:
            raise ConfigError("need 0 < alpha <= epsilon <= 1")
        if self.eta is not None and not 0.0 <= self.eta <= self.epsilon:
            raise ConfigError("eta must lie in [0, epsilon]")
        # s1 + s2 == 0 is tolerated as an explicit identity run
        if self.s1 < 0 or self.s2 < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.temperature <= 0.0:
            raise ConfigError("softmax temperature must be positive")
        if self.guidance_weight < 0.0:
            raise ConfigError("guidance weight must be nonnegative")
        if self.stages < 1:
            raise ConfigError("at least one stage required")
        if self.guidance_mode is not None and self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance mode {self.guidance_mode!r}")

    @property
    def random_start_range(self) -> float:
        return self.epsilon if self.eta is None else self.eta


@dataclass(frozen=True)
class LossBreakdown:
    vision_term: float  # -(1/N) sum_j cos(v_j, v'_j)
    guide_term: float  # (1/N) sum_j cos(v'_j, p_j)
    objective: float  # the ascended weighted combination
    per_token: np.ndarray = field(repr=False)  # [N] weighted contributions


@dataclass(frozen=True)
class StepRecord:
    index: int
    stage: int
    loss: LossBreakdown
    linf: float  # measured max |adv - clean| after the step
    token_deviation: np.ndarray | None = field(default=None, repr=False)  # [N]
    attention_deviation: np.ndarray | None = field(default=None, repr=False)  # [N]


@dataclass(frozen=True)
class AttackTrace:
    adv_image: np.ndarray
    per_step: list[StepRecord]
    weights_per_stage: list[np.ndarray]
    anchor_index: int
    config: AttackConfig
    token_deviation: np.ndarray | None = None  # [steps, N] 1 - cos vs clean
    attention_deviation: np.ndarray | None = None  # [steps, N] |attn - clean attn|


def vision_loss(v_clean: TokenFeatures, v_adv: TokenFeatures) -> float:
    """Negated mean per-token cosine between clean and adversarial features."""
    return float(-token_cosines(v_clean.patch_tokens, v_adv.patch_tokens).mean())


def guide_loss(v_adv: TokenFeatures, anchor: np.ndarray) -> float:
    """Mean per-token cosine between adversarial features and the anchor grid."""
    return float(token_cosines(v_adv.patch_tokens, anchor).mean())


def resolve_layer(selector: str | int, depth: int) -> int:
    """Map a layer selector onto a 0-based index.

    Integers are 1-based (layer 1 is the first block), "middle" is
    ceil(depth / 2) in that same 1-based convention, "final" the last block.
    """
    if selector == "middle":
        idx = (depth + 1) // 2
    elif selector == "final":
        idx = depth
    elif isinstance(selector, int) and not isinstance(selector, bool):
        idx = selector
    else:
        raise ConfigError(f"bad layer selector {selector!r}")
    if not 1 <= idx <= depth:
        raise ConfigError(f"layer {idx} outside [1, {depth}]")
    return idx - 1


def head_mean_patch_attention(profile: AttentionProfile, layer_index: int) -> np.ndarray:
    """Head-averaged class-token attention over the N patch entries."""
    rows = profile.rows
    if not 0 <= layer_index < rows.shape[0]:
        raise ConfigError(f"layer index {layer_index} outside profile depth {rows.shape[0]}")
    return rows[layer_index].mean(axis=0)[1:]


def attention_weights(
    profile: AttentionProfile, layer_selector: str | int, temperature: float
) -> np.ndarray:
    """Temperature softmax of the head-mean class attention at one layer.

    The class-to-class entry is dropped, so the weights live on the N patch
    tokens and sum to one.
    """
    if temperature <= 0.0:
        raise ConfigError("softmax temperature must be positive")
    scores = head_mean_patch_attention(profile, resolve_layer(layer_selector, profile.rows.shape[0]))
    scaled = scores / temperature
    e = np.exp(scaled - scaled.max())
    return e / e.sum()


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n, dtype=np.float64)


def _check_objective_inputs(v_clean, v_adv, anchor, weights):
    n, _ = v_clean.patch_tokens.shape
    if v_adv.patch_tokens.shape != v_clean.patch_tokens.shape:
        raise ShapeError("clean and adversarial grids differ in shape")
    if anchor.shape != v_clean.patch_tokens.shape:
        raise ShapeError("anchor grid shape mismatch")
    if weights.shape != (n,):
        raise ShapeError(f"weights must be [{n}]")


def objective(
    v_clean: TokenFeatures,
    v_adv: TokenFeatures,
    anchor: np.ndarray,
    weights: np.ndarray,
    guidance_weight: float,
) -> LossBreakdown:
    """Evaluate the weighted ascent objective and its per-token pieces."""
    _check_objective_inputs(v_clean, v_adv, anchor, weights)
    n = weights.shape[0]
    cos_clean = token_cosines(v_clean.patch_tokens, v_adv.patch_tokens)
    cos_anchor = token_cosines(v_adv.patch_tokens, anchor)
    per_token = weights * (-cos_clean + guidance_weight * cos_anchor)
    return LossBreakdown(
        vision_term=float(-cos_clean.mean()),
        guide_term=float(cos_anchor.mean()),
        objective=float(per_token.sum() / n),
        per_token=per_token,
    )


def objective_cotangent(
    v_clean: TokenFeatures,
    v_adv: TokenFeatures,
    anchor: np.ndarray,
    weights: np.ndarray,
    guidance_weight: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(objective)/d(v_adv): the cotangent fed to the provider VJP.

    Uses d cos(u, b)/du = b/(|u||b|) - cos(u, b) * u/|u|^2 per token row.
    The class token does not appear in the objective, so its cotangent is
    zero.
    """
    _check_objective_inputs(v_clean, v_adv, anchor, weights)
    u = v_adv.patch_tokens
    a = v_clean.patch_tokens
    n = weights.shape[0]
    nu = row_norms(u, "adversarial features")
    na = row_norms(a, "clean features")
    npr = row_norms(anchor, "anchor")
    cos_clean = (a * u).sum(axis=1) / (na * nu)
    cos_anchor = (anchor * u).sum(axis=1) / (npr * nu)
    d_clean = a / (nu * na)[:, None] - (cos_clean / (nu * nu))[:, None] * u
    d_anchor = anchor / (nu * npr)[:, None] - (cos_anchor / (nu * nu))[:, None] * u
    cot_patch = (weights / n)[:, None] * (-d_clean + guidance_weight * d_anchor)
    return cot_patch, np.zeros(u.shape[1], dtype=u.dtype)


def feasible_bounds(
    x_clean: np.ndarray, epsilon: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel clip bounds for the budget ball intersected with [0, 1].

    `x_clean + epsilon` rounds, so a pixel clipped to it can measure farther
    than epsilon from the clean value. Bounds are pulled inward by ulps until
    the measured distance test passes, making feasibility exact under plain
    float subtraction.
    """
    hi = x_clean + epsilon
    for _ in range(4):
        over = (hi - x_clean) > epsilon
        if not over.any():
            break
        hi = np.where(over, np.nextafter(hi, -np.inf), hi)
    else:
        raise AssertionError("upper bound correction did not converge")
    lo = x_clean - epsilon
    for _ in range(4):
        over = (x_clean - lo) > epsilon
        if not over.any():
            break
        lo = np.where(over, np.nextafter(lo, np.inf), lo)
    else:
        raise AssertionError("lower bound correction did not converge")
    return np.maximum(lo, 0.0), np.minimum(hi, 1.0)


def _deviations(v_clean, v_adv, attn_clean, attn_adv):
    token_dev = 1.0 - token_cosines(v_clean.patch_tokens, v_adv.patch_tokens)
    attn_dev = np.abs(attn_adv - attn_clean)
    return token_dev, attn_dev


def pgd_stage(
    provider,
    x_clean: np.ndarray,
    x_start: np.ndarray,
    v_clean: TokenFeatures,
    anchor: np.ndarray,
    weights: np.ndarray,
    steps: int,
    config: AttackConfig,
    stage: int = 0,
    step_offset: int = 0,
    attn_clean: np.ndarray | None = None,
) -> tuple[np.ndarray, list[StepRecord]]:
    """Run one stage of sign-gradient ascent with fixed token weights."""
    lo, hi = feasible_bounds(x_clean, config.epsilon)
    if np.abs(x_start - x_clean).max() > config.epsilon:
        raise ConfigError("stage start point violates the budget ball")
    layer = resolve_layer(config.layer_selector, provider.info().layers)

    x_cur = np.array(x_start, dtype=np.float64, copy=True)
    records: list[StepRecord] = []
    for i in range(steps):
        v_adv, profile = provider.encode(x_cur)
        breakdown = objective(v_clean, v_adv, anchor, weights, config.guidance_weight)
        cot_patch, cot_class = objective_cotangent(
            v_clean, v_adv, anchor, weights, config.guidance_weight
        )
        grad = provider.vjp(x_cur, cot_patch, cot_class)
        x_cur = np.clip(x_cur + config.alpha * np.sign(grad), lo, hi)
        linf = float(np.abs(x_cur - x_clean).max())
        assert linf <= config.epsilon, "budget violated after projection"

        token_dev = attn_dev = None
        if config.record_deviation and attn_clean is not None:
            token_dev, attn_dev = _deviations(
                v_clean, v_adv, attn_clean, head_mean_patch_attention(profile, layer)
            )
        records.append(
            StepRecord(
                index=step_offset + i,
                stage=stage,
                loss=breakdown,
                linf=linf,
                token_deviation=token_dev,
                attention_deviation=attn_dev,
            )
        )
    return x_cur, records


def pa_attack(
    provider,
    x_clean: np.ndarray,
    bank: PrototypeBank,
    config: AttackConfig,
) -> AttackTrace:
    """Full prototype-anchored attack: random start, anchor selection from
    clean features, stage one under clean-image attention weights, then one
    or more refinement stages whose weights are re-extracted from the current
    adversarial iterate.
    """
    info = provider.info()
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if bank.grid_shape != (info.n, info.d):
        raise ConfigError(
            f"bank grid {bank.grid_shape} incompatible with encoder ({info.n}, {info.d})"
        )

    lo, hi = feasible_bounds(x_clean, config.epsilon)
    eta = config.random_start_range
    if eta > 0.0:
        rng = np.random.Generator(np.random.PCG64(config.seed))
        x_cur = np.clip(x_clean + rng.uniform(-eta, eta, size=x_clean.shape), lo, hi)
    else:
        x_cur = x_clean.copy()

    v_clean, profile_clean = provider.encode(x_clean)
    anchor, anchor_index = select_anchor(bank, v_clean, mode=config.guidance_mode)
    layer = resolve_layer(config.layer_selector, info.layers)
    attn_clean = head_mean_patch_attention(profile_clean, layer)

    def stage_weights(profile: AttentionProfile) -> np.ndarray:
        if config.use_attention:
            return attention_weights(profile, config.layer_selector, config.temperature)
        return uniform_weights(info.n)

    weights_per_stage = [stage_weights(profile_clean)]
    x_cur, records = pgd_stage(
        provider, x_clean, x_cur, v_clean, anchor, weights_per_stage[0],
        config.s1, config, stage=0, step_offset=0, attn_clean=attn_clean,
    )
    for extra in range(1, config.stages):
        _, profile_adv = provider.encode(x_cur)
        weights_per_stage.append(stage_weights(profile_adv))
        x_cur, more = pgd_stage(
            provider, x_clean, x_cur, v_clean, anchor, weights_per_stage[-1],
            config.s2, config, stage=extra, step_offset=len(records),
            attn_clean=attn_clean,
        )
        records.extend(more)

    token_dev = attn_dev = None
    if config.record_deviation and records:
        token_dev = np.stack([r.token_deviation for r in records])
        attn_dev = np.stack([r.attention_deviation for r in records])
    return AttackTrace(
        adv_image=x_cur,
        per_step=records,
        weights_per_stage=weights_per_stage,
        anchor_index=anchor_index,
        config=config,
        token_deviation=token_dev,
        attention_deviation=attn_dev,
    )


def with_overrides(config: AttackConfig, **overrides) -> AttackConfig:
    """Build a config variant; unknown keys raise through dataclasses.replace."""
    return replace(config, **overrides)
