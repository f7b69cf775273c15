"""Co-guidance map and the patch-wise sampling distribution derived from it."""

from dataclasses import dataclass

import numpy as np

from .image import as_mask, grid_shape, partition


@dataclass(frozen=True)
class GuidanceMap:
    data: np.ndarray
    eta: float


@dataclass(frozen=True)
class PatchDistribution:
    """Sampling weights over the N patches of one image.

    `uniform_fallback` marks a guidance map with zero total mass, for which
    the weights are uniform.
    """

    weights: np.ndarray
    uniform_fallback: bool = False
    patch_size: int = 0

    @property
    def n(self):
        return len(self.weights)

    @property
    def n_positive(self):
        return int(np.count_nonzero(self.weights > 0))


def fuse_guidance(anatomy, probmap, eta=0.5):
    """G = eta * anatomy + (1 - eta) * probmap."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    b = as_mask(anatomy).astype(np.float64)
    m = np.asarray(probmap, dtype=np.float64)
    if b.shape != m.shape:
        raise ValueError(f"anatomy {b.shape} and probability map {m.shape} differ in shape")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("probability map values must lie in [0, 1]")
    g = eta * b + (1.0 - eta) * m
    return GuidanceMap(np.clip(g, 0.0, 1.0), float(eta))


def patch_distribution(guidance, patch_size=16):
    """Normalized per-patch mass of the guidance map (row-major patches)."""
    g = guidance.data if isinstance(guidance, GuidanceMap) else np.asarray(guidance, dtype=np.float64)
    grid_shape(g.shape, patch_size)
    sums = partition(g, patch_size).sum(axis=(1, 2))
    total = sums.sum()
    if total <= 0:
        n = len(sums)
        return PatchDistribution(np.full(n, 1.0 / n), True, int(patch_size))
    return PatchDistribution(sums / total, False, int(patch_size))


def write_distribution(dist, path):
    """Header ``N P uniform_fallback`` then one weight per line."""
    lines = [f"{dist.n} {dist.patch_size} {int(dist.uniform_fallback)}"]
    lines += [repr(float(w)) for w in dist.weights]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_distribution(path):
    with open(path) as fh:
        rows = [line.strip() for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty distribution file")
    header = rows[0].split()
    if len(header) != 3:
        raise ValueError(f"{path}: header must be 'N P uniform_fallback', got {rows[0]!r}")
    n, p = int(header[0]), int(header[1])
    fallback = header[2].lower() in ("1", "true")
    weights = np.array([float(r) for r in rows[1:]])
    if len(weights) != n:
        raise ValueError(f"{path}: header declares {n} weights, found {len(weights)}")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"{path}: weights must be non-negative and sum to 1")
    return PatchDistribution(weights, fallback, p)
