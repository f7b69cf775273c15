"""Unsupervised vessel extraction from a single angiogram.

Three stages: multi-scale Hessian (Frangi) vesselness, a percentile threshold
on the response, and region growing from the strongest response so that only
one connected vessel tree survives.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import as_field, as_gray, as_mask, gaussian_second_derivatives, percentile

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class VesselnessParams:
    """Parameters of the extraction pipeline.

    `frangi_c` is either a positive number or ``"auto"``, meaning half of the
    largest Hessian Frobenius norm at each scale.  With `dark_vessels` the
    image is inverted first, since vessels in X-ray angiograms are dark.
    """

    scales: tuple = (1.0, 2.0, 3.0, 4.0)
    alpha: float = 92.0
    frangi_beta: float = 0.5
    frangi_c: object = "auto"
    dark_vessels: bool = True

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales or any(not s > 0 for s in scales):
            raise ValueError(f"scales must be non-empty and positive, got {scales}")
        if not 0.0 <= self.alpha <= 100.0:
            raise ValueError(f"alpha must be in [0, 100], got {self.alpha}")
        if not self.frangi_beta > 0:
            raise ValueError(f"frangi_beta must be positive, got {self.frangi_beta}")
        if self.frangi_c != "auto":
            if isinstance(self.frangi_c, str) or not float(self.frangi_c) > 0:
                raise ValueError(f"frangi_c must be 'auto' or positive, got {self.frangi_c!r}")


def eigen2x2(ixx, ixy, iyy):
    """Eigenvalues of [[ixx, ixy], [ixy, iyy]] ordered so |l1| <= |l2|.

    Works elementwise on arrays.  On a magnitude tie the non-negative
    eigenvalue comes first.
    """
    ixx = np.asarray(ixx, dtype=np.float64)
    ixy = np.asarray(ixy, dtype=np.float64)
    iyy = np.asarray(iyy, dtype=np.float64)
    t = 0.5 * (ixx + iyy)
    d = 0.5 * (ixx - iyy)
    root = np.hypot(d, ixy)
    hi = t + root
    lo = t - root
    swap = (np.abs(hi) > np.abs(lo)) | ((np.abs(hi) == np.abs(lo)) & (hi < lo))
    l1 = np.where(swap, lo, hi)
    l2 = np.where(swap, hi, lo)
    if l1.ndim == 0:
        return float(l1), float(l2)
    return l1, l2


def frangi_response(l1, l2, beta, c):
    """Frangi vesselness for bright tubes given ordered eigenvalues."""
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    out = np.zeros(np.broadcast(l1, l2).shape)
    valid = l2 < 0
    if c <= 0 or not np.any(valid):
        return out
    a = l1[valid]
    b = l2[valid]
    rb2 = (a / b) ** 2
    s2 = a * a + b * b
    out[valid] = np.exp(-rb2 / (2.0 * beta * beta)) * (1.0 - np.exp(-s2 / (2.0 * c * c)))
    return out


def vesselness_at_scale(img, sigma, params=VesselnessParams()):
    img = as_gray(img)
    if params.dark_vessels:
        img = 1.0 - img
    ixx, ixy, iyy = gaussian_second_derivatives(img, sigma)
    if params.frangi_c == "auto":
        c = 0.5 * float(np.sqrt(ixx ** 2 + 2.0 * ixy ** 2 + iyy ** 2).max())
    else:
        c = float(params.frangi_c)
    l1, l2 = eigen2x2(ixx, ixy, iyy)
    return frangi_response(l1, l2, params.frangi_beta, c)


def multiscale_vesselness(img, params=VesselnessParams(), return_scales=False):
    """Pixelwise maximum of the single-scale responses over `params.scales`.

    With `return_scales`, also return the index of the winning scale per
    pixel (first scale wins ties).
    """
    img = as_gray(img)
    responses = np.stack([vesselness_at_scale(img, s, params) for s in params.scales])
    v = responses.max(axis=0)
    if return_scales:
        return v, responses.argmax(axis=0)
    return v


def adaptive_threshold(v, alpha):
    """Binary mask of pixels strictly above the alpha-th percentile of `v`."""
    v = as_field(v)
    return (v > percentile(v, alpha)).astype(np.uint8)


def region_grow(mask, v):
    """Keep the 8-connected component of `mask` that contains the seed.

    The seed is the first (row-major) maximum of `v`.  If the mask is unset
    there, the nearest set pixel is used instead (ties again row-major).
    """
    mask = as_mask(mask)
    v = as_field(v)
    if mask.shape != v.shape:
        raise ValueError(f"mask {mask.shape} and field {v.shape} differ in shape")
    if not mask.any():
        return np.zeros_like(mask)
    seed = np.unravel_index(int(np.argmax(v)), v.shape)
    if not mask[seed]:
        rows, cols = np.nonzero(mask)
        d2 = (rows - seed[0]) ** 2 + (cols - seed[1]) ** 2
        k = int(np.argmin(d2))
        seed = (rows[k], cols[k])
    labels, _ = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return (labels == labels[seed]).astype(np.uint8)


def extract_anatomy(img, params=VesselnessParams(), return_vesselness=False):
    """Binary vessel mask of `img` (single 8-connected component or empty)."""
    v = multiscale_vesselness(img, params)
    mask = region_grow(adaptive_threshold(v, params.alpha), v)
    if return_vesselness:
        return mask, v
    return mask
