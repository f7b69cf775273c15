"""Overlap and topology metrics for binary vessel masks."""

import numpy as np
from scipy import ndimage

from .image import as_mask

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _pair(pred, gt):
    pred = as_mask(pred).astype(bool)
    gt = as_mask(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def dsc(pred, gt):
    """Dice similarity coefficient; two empty masks score 1."""
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def _neighbours(padded):
    """P2..P9 (clockwise from north) for every interior pixel of a padded stack."""
    c = padded
    return (
        c[..., :-2, 1:-1],  # P2 north
        c[..., :-2, 2:],    # P3 north-east
        c[..., 1:-1, 2:],   # P4 east
        c[..., 2:, 2:],     # P5 south-east
        c[..., 2:, 1:-1],   # P6 south
        c[..., 2:, :-2],    # P7 south-west
        c[..., 1:-1, :-2],  # P8 west
        c[..., :-2, :-2],   # P9 north-west
    )


def _thinning_step(img, first):
    """Candidates for deletion in one Zhang-Suen sub-iteration."""
    padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)])
    p = [n.astype(np.int8) for n in _neighbours(padded)]
    p2, p3, p4, p5, p6, p7, p8, p9 = p
    count = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
    ring = p + [p2]
    transitions = np.zeros_like(count)
    for a, b in zip(ring[:-1], ring[1:]):
        transitions += (a == 0) & (b == 1)
    if first:
        c1 = (p2 * p4 * p6) == 0
        c2 = (p4 * p6 * p8) == 0
    else:
        c1 = (p2 * p4 * p8) == 0
        c2 = (p2 * p6 * p8) == 0
    return img & (count >= 2) & (count <= 6) & (transitions == 1) & c1 & c2


def _protect_vanishing(img, delete):
    """Keep one pixel of any component that a sub-iteration would erase.

    Parallel Zhang-Suen deletes every pixel of a 2x2 block at once; here the
    first pixel (row-major) of such a component survives instead.
    """
    lead = img.ndim - 2
    structure = np.zeros((3,) * lead + (3, 3), dtype=bool)
    structure[(1,) * lead] = True  # connect within each 2-D slice only
    labels, n = ndimage.label(img, structure=structure)
    alive = np.zeros(n + 1, dtype=bool)
    alive[labels[img & ~delete]] = True
    alive[0] = True
    flat = labels.reshape(-1)
    values, first = np.unique(flat, return_index=True)
    vanished = first[~alive[values]]
    if len(vanished):
        delete = delete.copy()
        delete.reshape(-1)[vanished] = False
    return delete


def _thin(stack):
    img = stack.astype(bool).copy()
    while True:
        changed = False
        for first in (True, False):
            delete = _thinning_step(img, first)
            if delete.any():
                delete = _protect_vanishing(img, delete)
            if delete.any():
                img &= ~delete
                changed = True
        if not changed:
            return img.astype(np.uint8)


def skeletonize(mask):
    """Zhang-Suen thinning to a fixpoint (one-pixel-wide centerlines).

    Pixels outside the raster count as background.  Unlike the textbook
    scheme, a component is never erased completely: a 2x2 block thins to a
    single pixel.
    """
    return _thin(as_mask(mask))


def skeletonize_batch(masks):
    """Thin a (K, H, W) stack of masks; equals K separate calls."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValueError(f"expected a (K, H, W) stack, got shape {masks.shape}")
    return _thin(masks)


def _tfrac(skeleton, other):
    n = int(skeleton.sum())
    if n == 0:
        return None
    return int(np.logical_and(skeleton, other).sum()) / n


def cldice_from_skeletons(pred, gt, skel_pred, skel_gt):
    tprec = _tfrac(skel_pred, gt)
    tsens = _tfrac(skel_gt, pred)
    if tprec is None and tsens is None:
        return 1.0
    if tprec is None or tsens is None:
        return 0.0
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def cldice(pred, gt):
    """Centerline Dice: harmonic mean of topology precision and sensitivity."""
    pred, gt = _pair(pred, gt)
    skel_pred = skeletonize(pred).astype(bool)
    skel_gt = skeletonize(gt).astype(bool)
    return cldice_from_skeletons(pred, gt, skel_pred, skel_gt)


def count_components(mask):
    """Number of 8-connected components."""
    return int(ndimage.label(np.asarray(mask), structure=EIGHT_CONNECTED)[1])
