"""Lightweight convolutional vessel segmentor.

A three-level encoder-decoder (channel widths 8/16/32, skip connections)
trained with per-pixel binary cross-entropy on pseudo-labels.  Once trained
it is frozen and used twice: to produce probability maps for guidance and as
the differentiable surrogate inside the consistency loss.
"""

import logging

import numpy as np

from . import nn
from . import rng as rngmod
from .nn import Conv2d, Module

log = logging.getLogger(__name__)

WIDTHS = (8, 16, 32)
PROB_EPS = 1e-6


class SegmentorModel(Module):
    def __init__(self, seed=0, widths=WIDTHS, dtype=np.float64):
        rng = rngmod.stream(seed, rngmod.INIT, 1)
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.enc = [
            [Conv2d(rng, 1, w1, dtype=dtype), Conv2d(rng, w1, w1, dtype=dtype)],
            [Conv2d(rng, w1, w2, dtype=dtype), Conv2d(rng, w2, w2, dtype=dtype)],
            [Conv2d(rng, w2, w3, dtype=dtype), Conv2d(rng, w3, w3, dtype=dtype)],
        ]
        self.bottleneck = Conv2d(rng, w3, w3, dtype=dtype)
        self.dec = [
            Conv2d(rng, w3 + w3, w2, dtype=dtype),
            Conv2d(rng, w2 + w2, w1, dtype=dtype),
            Conv2d(rng, w1 + w1, w1, dtype=dtype),
        ]
        self.head = Conv2d(rng, w1, 1, k=1, std=0.02, dtype=dtype)
        self.dtype = np.dtype(dtype)

    def named_parameters(self, prefix=""):
        for i, (a, b) in enumerate(self.enc):
            yield from a.named_parameters(f"{prefix}enc{i}.0.")
            yield from b.named_parameters(f"{prefix}enc{i}.1.")
        yield from self.bottleneck.named_parameters(f"{prefix}bottleneck.")
        for i, conv in enumerate(self.dec):
            yield from conv.named_parameters(f"{prefix}dec{i}.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def logits(self, x):
        """NCHW input (C=1) -> NCHW logits; H and W must be divisible by 8."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"segmentor expects (N, 1, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ValueError(f"segmentor input {h}x{w} must have sides divisible by 8")
        skips = []
        for a, b in self.enc:
            x = nn.relu(b(nn.relu(a(x))))
            skips.append(x)
            x = nn.avg_pool2(x)
        x = nn.relu(self.bottleneck(x))
        for conv, skip in zip(self.dec, reversed(skips)):
            x = nn.concat([nn.upsample2(x), skip], axis=1)
            x = nn.relu(conv(x))
        return self.head(x)

    def forward(self, x):
        return nn.sigmoid(self.logits(x))


def _as_batch(img, dtype):
    arr = img.data if isinstance(img, nn.Tensor) else np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return nn.Tensor(arr, dtype=dtype)


def seg_forward(model, img):
    """Probability map of a 2-D image (or a stack); values in (0, 1).

    Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS], the range the
    consistency loss uses, because a confident sigmoid underflows to exactly
    0 or 1.  Runs without recording a graph; use ``model(tensor)`` when
    gradients are needed.
    """
    with nn.no_grad():
        out = model(_as_batch(img, model.dtype)).data[:, 0]
    out = np.clip(out.astype(np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return out[0] if np.ndim(img) == 2 else out


def bce(prob, target, eps=PROB_EPS):
    """Mean binary cross-entropy of a probability tensor against a constant target."""
    q = nn.clip(prob, eps, 1.0 - eps)
    t = np.asarray(target.data if isinstance(target, nn.Tensor) else target, dtype=q.dtype)
    pos = nn.mul(nn.log(q), t)
    neg = nn.mul(nn.log(1.0 - q), 1.0 - t)
    return -nn.mean(pos + neg)


def train_segmentor(images, labels, epochs=30, lr=1e-2, seed=0, batch_size=4,
                    model=None, callback=None):
    """Fit a segmentor to (image, pseudo-label) pairs with Adam on BCE.

    Returns ``(model, history)`` where history holds the mean loss per epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("train_segmentor needs a non-empty (K, H, W) image stack")
    if labels.shape != images.shape:
        raise ValueError(f"labels {labels.shape} do not match images {images.shape}")
    model = SegmentorModel(seed) if model is None else model
    opt = nn.Adam(model.trainable_parameters(), lr=lr)
    history = []
    n = len(images)
    for epoch in range(epochs):
        order = rngmod.stream(seed, rngmod.SHUFFLE, 1, epoch).permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            logits = model.logits(nn.Tensor(images[idx][:, None], dtype=model.dtype))
            loss = nn.bce_with_logits(logits, labels[idx][:, None])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        log.debug("segmentor epoch %d loss %.5f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return model, history
