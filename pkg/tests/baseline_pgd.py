"""Plain vision-loss PGD, coded as a standalone loop.

This is the reference the engine must collapse to when guidance is off,
weights are uniform and there is a single stage with no random start. It
shares no control flow with the engine: one flat loop, inline cosine
gradient, inline projection (the same documented rule: per-pixel bounds
nudged until the measured distance stays inside the budget).
"""

import numpy as np


def _exact_bounds(clean, epsilon):
    hi = clean + epsilon
    for _ in range(4):
        over = (hi - clean) > epsilon
        if not over.any():
            break
        hi = np.where(over, np.nextafter(hi, -np.inf), hi)
    lo = clean - epsilon
    for _ in range(4):
        over = (clean - lo) > epsilon
        if not over.any():
            break
        lo = np.where(over, np.nextafter(lo, np.inf), lo)
    return np.maximum(lo, 0.0), np.minimum(hi, 1.0)


def plain_vision_pgd(provider, x_clean, steps, epsilon, alpha):
    """Ascend the mean per-token feature dissimilarity with sign steps.

    Returns (adversarial image, per-step (objective, linf) list). The
    recorded objective uses uniform token weights w_j = 1/N applied to the
    negated per-token cosine and a final 1/N normalization, matching the
    engine's bookkeeping for the degenerate configuration.
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    lo, hi = _exact_bounds(x_clean, epsilon)
    v_clean = provider.encode(x_clean)[0]
    a = v_clean.patch_tokens
    n = a.shape[0]
    na = np.linalg.norm(a, axis=1)

    x = x_clean.copy()
    records = []
    for _ in range(steps):
        u = provider.encode(x)[0].patch_tokens
        nu = np.linalg.norm(u, axis=1)
        cos = (a * u).sum(axis=1) / (na * nu)
        weights = np.full(n, 1.0 / n, dtype=np.float64)
        objective = float((weights * (-cos)).sum() / n)

        dcos = a / (nu * na)[:, None] - (cos / (nu * nu))[:, None] * u
        cot = (weights / n)[:, None] * (-dcos)
        grad = provider.vjp(x, cot, np.zeros(u.shape[1]))
        x = np.clip(x + alpha * np.sign(grad), lo, hi)
        records.append((objective, float(np.abs(x - x_clean).max())))
    return x, records
