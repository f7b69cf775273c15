"""Masked-autoencoder pre-training with an anatomical consistency term.

The encoder sees only visible patches; the decoder fills the masked slots
with a learned mask token and predicts raw pixels for them.  The objective is

    l_mim = l_rec + l_cons

where l_rec is the pixel MSE over masked patches and l_cons is the binary
cross-entropy between the frozen segmentor's output on the input image
(target) and on the reconstruction (prediction).
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from . import rng as rngmod
from .image import as_gray, grid_shape, partition
from .masking import MaskSchedule, guidance_intensity, sample_mask
from .nn import Block, LayerNorm, Linear, Module, Parameter, trunc_normal
from .segmentor import bce

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "beta_e", "l_rec", "l_cons", "l_mim")


@dataclass(frozen=True)
class MAEConfig:
    img_size: int = 64
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    decoder_dim: int = 64
    decoder_depth: int = 1
    norm_pix_loss: bool = False

    @property
    def num_patches(self):
        rows, cols = grid_shape((self.img_size, self.img_size), self.patch_size)
        return rows * cols


def sincos_pos_embed(dim, rows, cols):
    """Fixed 2-D sine-cosine position table of shape (rows * cols, dim)."""
    if dim % 4:
        raise ValueError(f"position embedding dim must be a multiple of 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")

    def encode(pos):
        out = pos.reshape(-1)[:, None] * omega[None, :]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([encode(r), encode(c)], axis=1)


class MAEModel(Module):
    def __init__(self, cfg=MAEConfig(), seed=0, dtype=np.float64):
        rng = rngmod.stream(seed, rngmod.INIT, 2)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rows, cols = grid_shape((cfg.img_size, cfg.img_size), cfg.patch_size)
        p2 = cfg.patch_size ** 2
        self.patch_embed = Linear(rng, p2, cfg.embed_dim, dtype=dtype)
        self.blocks = [Block(rng, cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim, dtype)
        self.decoder_embed = Linear(rng, cfg.embed_dim, cfg.decoder_dim, dtype=dtype)
        self.mask_token = Parameter(trunc_normal(rng, (1, cfg.decoder_dim), 0.02, dtype))
        self.decoder_blocks = [Block(rng, cfg.decoder_dim, cfg.num_heads, cfg.mlp_ratio, dtype)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(cfg.decoder_dim, dtype)
        self.decoder_pred = Linear(rng, cfg.decoder_dim, p2, dtype=dtype)
        # Fixed tables, not parameters.
        self._pos = sincos_pos_embed(cfg.embed_dim, rows, cols).astype(dtype)
        self._dec_pos = sincos_pos_embed(cfg.decoder_dim, rows, cols).astype(dtype)

    def forward(self, img, mask):
        return mae_forward(self, img, mask)


def patchify(img, patch_size):
    """(H, W) array -> (N, P*P) array of row-major patches."""
    return partition(img, patch_size).reshape(-1, patch_size * patch_size)


def mae_forward(model, img, mask):
    """Predicted pixels for the masked patches, shape (len(mask), P*P).

    Rows follow the order of ``mask.masked_indices``.
    """
    cfg = model.cfg
    img = as_gray(img)
    n = cfg.num_patches
    p2 = cfg.patch_size ** 2
    if img.shape != (cfg.img_size, cfg.img_size):
        raise ValueError(f"model expects {cfg.img_size}x{cfg.img_size} images, got {img.shape}")
    masked = np.asarray(mask.masked_indices, dtype=np.int64)
    if len(np.unique(masked)) != len(masked) or np.any(masked < 0) or np.any(masked >= n):
        raise ValueError(f"mask indices must be distinct and within [0, {n})")
    if len(masked) == 0:
        return nn.Tensor(np.zeros((0, p2), dtype=model.dtype))
    is_masked = np.zeros(n, dtype=bool)
    is_masked[masked] = True
    visible = np.nonzero(~is_masked)[0]

    patches = nn.Tensor(patchify(img, cfg.patch_size)[visible], dtype=model.dtype)
    x = model.patch_embed(patches) + model._pos[visible]
    for blk in model.blocks:
        x = blk(x)
    x = model.decoder_embed(model.norm(x))

    # Sequence slots: visible tokens first, then one mask token per masked patch.
    tokens = nn.concat([x, nn.take(model.mask_token, np.zeros(len(masked), dtype=np.int64))])
    slot = np.empty(n, dtype=np.int64)
    slot[visible] = np.arange(len(visible))
    slot[masked] = len(visible) + np.arange(len(masked))
    x = nn.take(tokens, slot) + model._dec_pos
    for blk in model.decoder_blocks:
        x = blk(x)
    x = model.decoder_pred(model.decoder_norm(x))
    return nn.take(x, masked)


def _targets(img, mask, patch_size, norm_pix=False):
    target = patchify(np.asarray(img, dtype=np.float64), patch_size)[mask.masked_indices]
    if norm_pix and len(target):
        mu = target.mean(axis=1, keepdims=True)
        var = target.var(axis=1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    return target


def recon_loss(predictions, img, mask, patch_size, norm_pix=False):
    """Mean squared pixel error over the masked patches (0 for an empty mask)."""
    target = _targets(img, mask, patch_size, norm_pix)
    if predictions.shape != target.shape:
        raise ValueError(f"predictions {predictions.shape} do not match masked targets {target.shape}")
    if target.size == 0:
        return nn.Tensor(np.float64(0.0))
    diff = predictions - target.astype(predictions.dtype)
    return nn.mean(diff * diff)


def compose_reconstruction(img, mask, predictions, patch_size):
    """Differentiable I': input pixels in visible patches, clamped predictions elsewhere.

    Returns an (H, W) tensor; gradient reaches only `predictions`.
    """
    img = as_gray(img)
    rows, cols = grid_shape(img.shape, patch_size)
    n = rows * cols
    masked = np.asarray(mask.masked_indices, dtype=np.int64)
    if not isinstance(predictions, nn.Tensor):
        predictions = nn.Tensor(predictions)
    if predictions.shape != (len(masked), patch_size * patch_size):
        raise ValueError(f"predictions {predictions.shape} do not align with {len(masked)} masked patches")
    is_masked = np.zeros(n, dtype=bool)
    is_masked[masked] = True
    visible = np.nonzero(~is_masked)[0]
    source = nn.Tensor(patchify(img, patch_size)[visible], dtype=predictions.dtype)
    parts = nn.concat([source, nn.clip(predictions, 0.0, 1.0)])
    slot = np.empty(n, dtype=np.int64)
    slot[visible] = np.arange(len(visible))
    slot[masked] = len(visible) + np.arange(len(masked))
    full = nn.take(parts, slot)
    p = patch_size
    return full.reshape(rows, cols, p, p).transpose(0, 2, 1, 3).reshape(rows * p, cols * p)


def consistency_loss(segmentor, img, i_prime):
    """BCE between S(I) (constant soft target) and S(I') (prediction).

    Only the prediction is clamped to [PROB_EPS, 1 - PROB_EPS]; the target is
    the raw sigmoid, so a saturated pair p = q = 1 costs about PROB_EPS.
    """
    img = as_gray(img)
    if tuple(i_prime.shape) != img.shape:
        raise ValueError(f"reconstruction {i_prime.shape} and image {img.shape} differ in shape")
    h, w = img.shape
    with nn.no_grad():
        target = segmentor(nn.Tensor(img[None, None], dtype=segmentor.dtype)).data
    target = target.reshape(h, w).astype(np.float64)
    q = segmentor(i_prime.reshape(1, 1, h, w)).reshape(h, w)
    return bce(q, target)


@dataclass
class LossReport:
    l_rec: float
    l_cons: float
    l_mim: float
    epoch: int
    step: int
    beta_e: float = 0.0

    def row(self):
        return {"epoch": self.epoch, "step": self.step, "beta_e": self.beta_e,
                "l_rec": self.l_rec, "l_cons": self.l_cons, "l_mim": self.l_mim}


def mim_loss(mae, segmentor, img, mask, consistency=True):
    """(l_mim, l_rec, l_cons) tensors for one image and mask."""
    cfg = mae.cfg
    pred = mae_forward(mae, img, mask)
    l_rec = recon_loss(pred, img, mask, cfg.patch_size, cfg.norm_pix_loss)
    if consistency and segmentor is not None:
        if cfg.norm_pix_loss:
            raise ValueError("consistency loss needs raw-pixel predictions; disable norm_pix_loss")
        i_prime = compose_reconstruction(img, mask, pred, cfg.patch_size)
        l_cons = consistency_loss(segmentor, img, i_prime)
    else:
        l_cons = nn.Tensor(np.float64(0.0))
    return l_rec + l_cons, l_rec, l_cons


def pretrain_step(mae, segmentor, img, dist, schedule, e, rng, optimizer,
                  consistency=True, step=0):
    """Sample a mask, compute l_rec + l_cons, and apply one optimizer update."""
    mask = sample_mask(dist, schedule, e, mae.cfg.num_patches, rng)
    optimizer.zero_grad()
    l_mim, l_rec, l_cons = mim_loss(mae, segmentor, img, mask, consistency)
    l_mim.backward()
    optimizer.step()
    return LossReport(float(l_rec.data), float(l_cons.data), float(l_mim.data), int(e), int(step),
                      guidance_intensity(e, schedule))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    beta0: float = 0.0
    betaE: float = 0.5
    gamma: float = 0.5
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    consistency: bool = True
    seed: int = 0


def pretrain_loop(mae, segmentor, images, dists, train=TrainConfig(), callback=None):
    """Run epochs 0..E-1 over `images`, one optimizer step per image.

    `dists` holds one PatchDistribution per image, computed once up front.
    The segmentor is frozen for the whole loop.  Returns the list of
    LossReports (one per step).
    """
    if len(images) != len(dists):
        raise ValueError(f"{len(images)} images but {len(dists)} distributions")
    if len(images) == 0:
        raise ValueError("pretrain_loop needs at least one image")
    schedule = MaskSchedule(train.beta0, train.betaE, train.epochs, train.gamma)
    if segmentor is not None:
        segmentor.freeze()
    opt = nn.make_optimizer(train.optimizer, mae.trainable_parameters(), train.lr, train.momentum)
    reports = []
    step = 0
    for e in range(train.epochs):
        order = rngmod.stream(train.seed, rngmod.SHUFFLE, 0, e).permutation(len(images))
        for i in order:
            gen = rngmod.stream(train.seed, rngmod.MASKING, int(i), e)
            rep = pretrain_step(mae, segmentor, images[i], dists[i], schedule, e, gen, opt,
                                train.consistency, step)
            reports.append(rep)
            if callback is not None:
                callback(rep)
            step += 1
        log.info("epoch %d beta %.4f mean l_mim %.5f", e, reports[-1].beta_e,
                 np.mean([r.l_mim for r in reports[-len(images):]]))
    return reports


def write_loss_log(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in reports:
            writer.writerow([r.epoch, r.step, repr(float(r.beta_e)), repr(r.l_rec),
                             repr(r.l_cons), repr(r.l_mim)])


def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
            for row in rows]
