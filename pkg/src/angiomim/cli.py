"""Command-line entry point: ``angiomim <subcommand> ...``.

Every subcommand reads the shared JSON config (``--config``) first, then
overrides it with its own flags, so a config that fails validation stops the
command before any work starts.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import rng as rngmod
from .config import ConfigError, PipelineConfig
from .guidance import fuse_guidance, patch_distribution, read_distribution, write_distribution
from .image import load_image, load_mask, save_image
from .masking import sample_mask
from .metrics import cldice, dsc
from .mim import MAEModel, pretrain_loop, write_loss_log
from .nn import load_checkpoint, save_checkpoint
from .pipeline import STAGES, StageError, run_pipeline
from .segmentor import SegmentorModel, seg_forward, train_segmentor
from .synth import SynthConfig, gen_dataset, read_manifest
from .vesselness import extract_anatomy

log = logging.getLogger("angiomim")

METRICS = {"dsc": dsc, "cldice": cldice}


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _c_value(text):
    return text if text == "auto" else float(text)


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON pipeline config")
    parser.add_argument("--seed", type=int, default=default, help="master seed")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker threads for per-image work")
    parser.add_argument("--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="angiomim",
                                     description="Anatomy-guided masked image modeling toolkit.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract-anatomy", parents=[common], help="Frangi vessel mask of one image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scales", type=_floats)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float, dest="frangi_beta")
    p.add_argument("--c", type=_c_value, dest="frangi_c")
    p.add_argument("--bright-vessels", action="store_true")
    p.add_argument("--dump-vesselness", metavar="VGM")

    p = sub.add_parser("pretrain-segmentor", parents=[common],
                       help="train the segmentor on Frangi pseudo-labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, dest="seg_epochs")
    p.add_argument("--lr", type=float, dest="seg_lr")
    p.add_argument("--out", required=True)

    p = sub.add_parser("segment", parents=[common], help="probability map of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-guidance", parents=[common], help="patch distribution of one image")
    p.add_argument("--anatomy", required=True)
    p.add_argument("--probmap", required=True)
    p.add_argument("--eta", type=float)
    p.add_argument("--patch", type=int, dest="patch_size")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-masks", parents=[common], help="masked patch sets per epoch")
    p.add_argument("--distribution", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta0", type=float)
    p.add_argument("--betaE", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain-mim", parents=[common], help="guided masked autoencoder training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--segmentor", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta0", type=float)
    p.add_argument("--betaE", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--patch", type=int, dest="patch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--no-consistency", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--log", required=True)

    p = sub.add_parser("eval", parents=[common], help="compare predicted and reference masks")
    p.add_argument("--pred", required=True, help="mask file or directory")
    p.add_argument("--gt", required=True, help="mask file or directory")
    p.add_argument("--metrics", default="dsc,cldice")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run-pipeline", parents=[common], help="all stages over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", action="append", choices=STAGES,
                   help="run only this stage (repeatable)")
    return parser


CONFIG_FLAGS = ("seed", "scales", "alpha", "frangi_beta", "frangi_c", "eta", "patch_size",
                "epochs", "beta0", "betaE", "gamma", "lr", "seg_epochs", "seg_lr")


def resolve_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {k: getattr(args, k, None) for k in CONFIG_FLAGS}
    if getattr(args, "bright_vessels", False):
        changes["dark_vessels"] = False
    if getattr(args, "no_consistency", False):
        changes["consistency"] = False
    return cfg.updated(**changes)


def _load_segmentor(path):
    state, meta = load_checkpoint(path)
    if meta.get("kind") not in (None, "segmentor"):
        raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r} model, not a segmentor")
    model = SegmentorModel(widths=tuple(meta.get("widths", (8, 16, 32))))
    model.load_state_dict(state)
    return model.freeze()


def _pseudo_labels(images, cfg, threads):
    params = cfg.vesselness_params()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            return np.stack(list(pool.map(lambda im: extract_anatomy(im, params), images)))
    return np.stack([extract_anatomy(im, params) for im in images])


def _manifest_images(path):
    items = read_manifest(path)["items"]
    if not items:
        raise ValueError(f"{path}: manifest lists no items")
    return np.stack([load_image(item["image"]) for item in items])


def cmd_gen_synthetic(args, cfg):
    synth = SynthConfig(size=args.size, seed=cfg.seed)
    path = gen_dataset(synth, args.n, args.out)
    print(path)


def cmd_extract_anatomy(args, cfg):
    img = load_image(args.input)
    mask, v = extract_anatomy(img, cfg.vesselness_params(), return_vesselness=True)
    save_image(mask, args.output)
    if args.dump_vesselness:
        save_image(v, args.dump_vesselness, format="vgm")


def cmd_pretrain_segmentor(args, cfg):
    images = _manifest_images(args.manifest)
    labels = _pseudo_labels(images, cfg, args.threads)
    model, history = train_segmentor(
        images, labels, cfg.seg_epochs, cfg.seg_lr, cfg.seed, cfg.seg_batch,
        callback=lambda e, loss: log.info("segmentor epoch %d bce %.5f", e, loss))
    save_checkpoint(args.out, model.state_dict(),
                    meta={"kind": "segmentor", "seed": cfg.seed, "widths": list(model.widths),
                          "history": history})


def cmd_segment(args, cfg):
    model = _load_segmentor(args.model)
    save_image(seg_forward(model, load_image(args.input)), args.out, format="vgm")


def cmd_make_guidance(args, cfg):
    anatomy = load_mask(args.anatomy)
    prob = np.clip(load_image(args.probmap), 0.0, 1.0)
    dist = patch_distribution(fuse_guidance(anatomy, prob, cfg.eta), cfg.patch_size)
    write_distribution(dist, args.out)


def cmd_sample_masks(args, cfg):
    dist = read_distribution(args.distribution)
    schedule = cfg.schedule()
    with open(args.out, "w") as fh:
        for e in range(schedule.E):
            m = sample_mask(dist, schedule, e, dist.n, rngmod.stream(cfg.seed, rngmod.MASKING, 0, e))
            idx = " ".join(str(int(i)) for i in m.masked_indices)
            fh.write(f"{e} {m.guided_count} {m.random_count} {idx}".rstrip() + "\n")


def cmd_pretrain_mim(args, cfg):
    images = _manifest_images(args.manifest)
    seg = _load_segmentor(args.segmentor)
    anatomy = _pseudo_labels(images, cfg, args.threads)
    probs = seg_forward(seg, images)
    dists = [patch_distribution(fuse_guidance(a, p, cfg.eta), cfg.patch_size)
             for a, p in zip(anatomy, probs)]
    mae = MAEModel(cfg.mae_config(images.shape[1]), seed=cfg.seed)
    reports = pretrain_loop(mae, seg, images, dists, cfg.train_config())
    save_checkpoint(args.out, mae.state_dict(),
                    meta={"kind": "mae", "config": cfg.to_dict(), "img_size": int(images.shape[1])})
    write_loss_log(reports, args.log)


def _mask_pairs(pred, gt):
    if os.path.isdir(pred) != os.path.isdir(gt):
        raise ValueError("--pred and --gt must both be files or both be directories")
    if not os.path.isdir(pred):
        return [(pred, gt)]
    exts = (".png", ".pgm", ".vgm")
    a = sorted(f for f in os.listdir(pred) if f.lower().endswith(exts))
    b = sorted(f for f in os.listdir(gt) if f.lower().endswith(exts))
    if len(a) != len(b) or not a:
        raise ValueError(f"directories hold {len(a)} and {len(b)} masks; need equal, non-zero counts")
    return [(os.path.join(pred, x), os.path.join(gt, y)) for x, y in zip(a, b)]


def cmd_eval(args, cfg):
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown or not names:
        raise ValueError(f"unknown metrics {unknown}; choose from {', '.join(METRICS)}")
    rows = []
    for p, g in _mask_pairs(args.pred, args.gt):
        pm, gm = load_mask(p), load_mask(g)
        rows.append([os.path.basename(p), os.path.basename(g)]
                    + [METRICS[m](pm, gm) for m in names])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pred", "gt"] + names)
        for row in rows:
            writer.writerow(row[:2] + [repr(float(v)) for v in row[2:]])
        writer.writerow(["mean", ""] + [repr(float(np.mean([r[2 + j] for r in rows])))
                                        for j in range(len(names))])


def cmd_run_pipeline(args, cfg):
    path = run_pipeline(cfg, args.manifest, args.out, tuple(args.stage or STAGES), args.threads)
    print(path)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "extract-anatomy": cmd_extract_anatomy,
    "pretrain-segmentor": cmd_pretrain_segmentor,
    "segment": cmd_segment,
    "make-guidance": cmd_make_guidance,
    "sample-masks": cmd_sample_masks,
    "pretrain-mim": cmd_pretrain_mim,
    "eval": cmd_eval,
    "run-pipeline": cmd_run_pipeline,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("angiomim: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"angiomim: config error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"angiomim: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"angiomim {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
