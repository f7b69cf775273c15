"""Weak-to-strong anatomy-guided mask sampling."""

import math
from dataclasses import dataclass

import numpy as np

from .guidance import PatchDistribution


@dataclass(frozen=True)
class MaskSchedule:
    beta0: float = 0.0
    betaE: float = 0.5
    E: int = 100
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("beta0", "betaE"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if int(self.E) != self.E or self.E < 1:
            raise ValueError(f"E must be a positive integer, got {self.E}")


@dataclass(frozen=True)
class MaskSet:
    masked_indices: np.ndarray  # guided draws first, then random ones
    guided_count: int
    random_count: int
    epoch: int

    def as_bool(self, n):
        out = np.zeros(n, dtype=bool)
        out[self.masked_indices] = True
        return out


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def guidance_intensity(e, schedule):
    """beta_e = beta0 + (e / E) * (betaE - beta0), for 0 <= e <= E."""
    if not 0 <= e <= schedule.E:
        raise ValueError(f"epoch {e} outside [0, {schedule.E}]")
    if e == schedule.E:
        return float(schedule.betaE)
    return schedule.beta0 + (e / schedule.E) * (schedule.betaE - schedule.beta0)


def weighted_sample_without_replacement(weights, k, rng):
    """Draw `k` distinct indices by sequential weighted draws.

    Each draw picks index j with probability w_j / (sum of remaining w), then
    removes j.  `weights` may be a PatchDistribution or an array.
    """
    if isinstance(weights, PatchDistribution):
        w = np.asarray(weights.weights, dtype=np.float64)
        if weights.uniform_fallback:
            w = np.full(len(w), 1.0 / len(w))
    else:
        w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    available = int(np.count_nonzero(w > 0))
    if k > available:
        raise ValueError(
            f"cannot draw {k} indices without replacement: only {available} have "
            f"positive weight (short by {k - available})")
    remaining = w.copy()
    chosen = np.empty(k, dtype=np.int64)
    for t in range(k):
        cdf = np.cumsum(remaining)
        u = rng.random() * cdf[-1]
        j = int(np.searchsorted(cdf, u, side="right"))
        # u can land on the last boundary through rounding; step back to a live index
        while j >= len(cdf) or remaining[j] == 0:
            j -= 1
        chosen[t] = j
        remaining[j] = 0.0
    return chosen


def sample_mask(dist, schedule, e, n, rng):
    """Masked patch set for epoch `e`.

    round(gamma * N) patches in total; round(beta_e * total) of them (capped at
    the number of positive-weight patches) are drawn from `dist`, the rest
    uniformly from the patches not yet chosen.
    """
    if dist.n != n:
        raise ValueError(f"distribution covers {dist.n} patches but N={n}")
    beta = guidance_intensity(e, schedule)
    k_total = round_half_away(schedule.gamma * n)
    available = n if dist.uniform_fallback else dist.n_positive
    k_guided = min(round_half_away(beta * k_total), available)
    guided = weighted_sample_without_replacement(dist, k_guided, rng)
    rest = np.setdiff1d(np.arange(n), guided, assume_unique=True)
    randoms = rng.choice(rest, size=k_total - k_guided, replace=False)
    indices = np.concatenate([guided, randoms.astype(np.int64)])
    return MaskSet(indices, k_guided, k_total - k_guided, int(e))
