"""Seeded synthetic angiograms: dark tube trees on a bright, noisy background."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import rng as rngmod
from .image import save_image


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    tubes: tuple = (1, 2)         # inclusive range of tube count
    radius: tuple = (1.5, 3.0)    # tube radius range in pixels
    contrast: float = 0.5         # depth of the vessel intensity dip
    background: float = 0.8
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tubes", tuple(int(t) for t in self.tubes))
        object.__setattr__(self, "radius", tuple(float(r) for r in self.radius))
        lo, hi = self.tubes
        if lo < 1 or hi < lo:
            raise ValueError(f"tube count range must satisfy 1 <= lo <= hi, got {self.tubes}")
        rlo, rhi = self.radius
        if rlo < 1 or rhi < rlo:
            raise ValueError(f"radius range must satisfy 1 <= lo <= hi, got {self.radius}")
        if not 0.0 <= self.contrast < 1.0:
            raise ValueError(f"contrast depth must be in [0, 1), got {self.contrast}")
        if self.noise_std < 0:
            raise ValueError(f"noise std must be non-negative, got {self.noise_std}")
        if not 0.0 < self.background <= 1.0:
            raise ValueError(f"background must be in (0, 1], got {self.background}")
        if self.size < 16:
            raise ValueError(f"image size must be at least 16, got {self.size}")


@dataclass(frozen=True)
class Tube:
    p0: tuple
    p1: tuple  # quadratic Bezier control point
    p2: tuple
    radius: float

    def points(self, n=400):
        t = np.linspace(0.0, 1.0, n)[:, None]
        a, b, c = (np.asarray(p, dtype=np.float64) for p in (self.p0, self.p1, self.p2))
        return (1 - t) ** 2 * a + 2 * (1 - t) * t * b + t ** 2 * c

    def length(self, n=2000):
        pts = self.points(n)
        return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def _far_endpoint(rng, p0, lo, hi, min_dist, attempts=64):
    """Rejection-sample an endpoint at least `min_dist` from p0.

    Falls back to the farthest candidate seen, so generation always terminates.
    """
    best, best_d = None, -1.0
    for _ in range(attempts):
        p2 = rng.uniform(lo, hi, 2)
        d = float(np.hypot(*(p2 - p0)))
        if d > min_dist:
            return p2
        if d > best_d:
            best, best_d = p2, d
    return best


def _random_tubes(cfg, rng):
    margin = cfg.radius[1] + 2.0
    lo, hi = margin, cfg.size - 1 - margin
    count = int(rng.integers(cfg.tubes[0], cfg.tubes[1] + 1))
    tubes = []
    for i in range(count):
        r = float(rng.uniform(*cfg.radius))
        if i == 0:
            # First tube crosses most of the field; both ends are redrawn
            # together because a central p0 may have no far enough partner.
            for _ in range(64):
                p0 = rng.uniform(lo, hi, 2)
                p2 = _far_endpoint(rng, p0, lo, hi, 0.6 * cfg.size, attempts=8)
                if np.hypot(*(p2 - p0)) > 0.6 * cfg.size:
                    break
        else:
            # Branches start on an existing centerline so the tree stays connected.
            parent = tubes[int(rng.integers(len(tubes)))]
            pts = parent.points()
            p0 = pts[int(rng.integers(len(pts) // 5, 4 * len(pts) // 5))]
            r = min(r, parent.radius)
            p2 = _far_endpoint(rng, p0, lo, hi, 0.3 * cfg.size)
        mid = 0.5 * (p0 + p2)
        bend = rng.normal(0.0, 0.15 * cfg.size, 2)
        p1 = np.clip(mid + bend, lo, hi)
        tubes.append(Tube(tuple(p0), tuple(p1), tuple(p2), r))
    return tubes


def render(tubes, cfg, noise):
    """Rasterize tubes to (image, mask); `noise` is an HxW standard-normal field."""
    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size].astype(np.float64)
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1)
    darkness = np.zeros(pix.shape[0])
    mask = np.zeros(pix.shape[0], dtype=bool)
    for tube in tubes:
        pts = tube.points()
        _, nearest = cKDTree(pts).query(pix)
        d2 = ((pix - pts[nearest]) ** 2).sum(axis=1)
        # Gaussian cross-section whose value at the tube wall is exp(-1/2).
        darkness = np.maximum(darkness, np.exp(-0.5 * d2 / tube.radius ** 2))
        mask |= d2 <= tube.radius ** 2
    img = cfg.background - cfg.contrast * darkness.reshape(cfg.size, cfg.size)
    img = np.clip(img + cfg.noise_std * noise, 0.0, 1.0)
    return img, mask.reshape(cfg.size, cfg.size).astype(np.uint8)


def gen_tube_image(cfg, rng=None, return_tubes=False):
    """One synthetic angiogram and its ground-truth vessel mask.

    Points are (row, col).  Centerlines are quadratic Bezier curves; the
    first spans the image and later ones branch off earlier centerlines.
    """
    rng = rngmod.as_generator(cfg.seed if rng is None else rng)
    tubes = _random_tubes(cfg, rng)
    noise = rng.standard_normal((cfg.size, cfg.size))
    img, mask = render(tubes, cfg, noise)
    if return_tubes:
        return img, mask, tubes
    return img, mask


def gen_dataset(cfg, n, out_dir, rng=None):
    """Write `n` image/mask PNG pairs plus ``manifest.json``; return its path.

    Item i is drawn from its own stream keyed by (seed, i), so any subset of
    indices can be regenerated independently.
    """
    if n < 1:
        raise ValueError(f"dataset size must be at least 1, got {n}")
    os.makedirs(out_dir, exist_ok=True)
    items = []
    for i in range(n):
        gen = rngmod.stream(cfg.seed, rngmod.SYNTH, i) if rng is None else rng
        img, mask = gen_tube_image(cfg, gen)
        name_img, name_mask = f"img_{i:04d}.png", f"mask_{i:04d}.png"
        save_image(img, os.path.join(out_dir, name_img))
        save_image(mask, os.path.join(out_dir, name_mask))
        items.append({"image": name_img, "mask": name_mask})
    manifest = {"config": asdict(cfg), "items": items}
    path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, path)
    return path


def write_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    """Load a manifest; item paths are resolved relative to its directory."""
    with open(path) as fh:
        manifest = json.load(fh)
    if not isinstance(manifest, dict) or "items" not in manifest:
        raise ValueError(f"{path}: manifest needs an 'items' list")
    base = os.path.dirname(os.path.abspath(path))
    resolved = []
    for item in manifest["items"]:
        if "image" not in item:
            raise ValueError(f"{path}: manifest item without 'image': {item}")
        resolved.append({k: (os.path.join(base, v) if isinstance(v, str) else v)
                         for k, v in item.items()})
    manifest["items"] = resolved
    return manifest


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
