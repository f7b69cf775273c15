"""End-to-end pipeline over a dataset manifest.

Stages run in order and each writes into one artifacts directory:

    extract-anatomy     anatomy/anat_XXXX.png
    pretrain-segmentor  segmentor.vck, segmentor_losses.csv
    segment             probmaps/prob_XXXX.vgm
    make-guidance       guidance/dist_XXXX.txt
    pretrain-mim        mim.vck, losses.csv
    eval                eval.csv

Every stage records a block (output hashes plus a few statistics) in
``stages/<name>.json``; ``summary.json`` gathers the blocks present.
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import PipelineConfig
from .guidance import fuse_guidance, patch_distribution, read_distribution, write_distribution
from .image import load_image, load_mask, save_image
from .metrics import cldice, dsc
from .mim import MAEModel, pretrain_loop, write_loss_log
from .nn import load_checkpoint, save_checkpoint
from .segmentor import SegmentorModel, seg_forward, train_segmentor
from .synth import file_sha256, read_manifest
from .vesselness import extract_anatomy

log = logging.getLogger(__name__)

STAGES = ("extract-anatomy", "pretrain-segmentor", "segment", "make-guidance",
          "pretrain-mim", "eval")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


class Pipeline:
    def __init__(self, config, manifest_path, out_dir, threads=1):
        self.cfg = config
        self.manifest_path = manifest_path
        self.manifest = read_manifest(manifest_path)
        self.items = self.manifest["items"]
        if not self.items:
            raise ValueError(f"{manifest_path}: manifest lists no items")
        self.out = out_dir
        self.threads = threads
        os.makedirs(os.path.join(out_dir, "stages"), exist_ok=True)

    # -- helpers --------------------------------------------------------------
    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def _indexed(self, folder, prefix, ext):
        return [self.path(folder, f"{prefix}_{i:04d}.{ext}") for i in range(len(self.items))]

    def images(self):
        return np.stack([load_image(item["image"]) for item in self.items])

    def anatomy_paths(self):
        return self._indexed("anatomy", "anat", "png")

    def prob_paths(self):
        return self._indexed("probmaps", "prob", "vgm")

    def dist_paths(self):
        return self._indexed("guidance", "dist", "txt")

    def _require(self, stage, paths):
        missing = [p for p in paths if not os.path.exists(p)]
        if missing:
            raise StageError(stage, f"missing input {os.path.relpath(missing[0], self.out)} "
                                    f"(run the earlier stage first)")

    def _record(self, stage, outputs, stats):
        block = {
            "stage": stage,
            "outputs": {os.path.relpath(p, self.out): file_sha256(p) for p in outputs},
            "stats": stats,
        }
        with open(self.path("stages", f"{stage}.json"), "w") as fh:
            json.dump(block, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return block

    def load_segmentor(self):
        seg = SegmentorModel(self.cfg.seed)
        state, _ = load_checkpoint(self.path("segmentor.vck"))
        seg.load_state_dict(state)
        return seg.freeze()

    # -- stages ---------------------------------------------------------------
    def extract_anatomy(self):
        os.makedirs(self.path("anatomy"), exist_ok=True)
        params = self.cfg.vesselness_params()
        masks = _map(lambda item: extract_anatomy(load_image(item["image"]), params),
                     self.items, self.threads)
        paths = self.anatomy_paths()
        for mask, p in zip(masks, paths):
            save_image(mask, p)
        fractions = [float(m.mean()) for m in masks]
        return self._record("extract-anatomy", paths, {
            "n_images": len(paths), "mean_vessel_fraction": float(np.mean(fractions)),
            "empty_masks": int(sum(f == 0 for f in fractions))})

    def pretrain_segmentor(self):
        self._require("pretrain-segmentor", self.anatomy_paths())
        images = self.images()
        labels = np.stack([load_mask(p) for p in self.anatomy_paths()])
        model, history = train_segmentor(images, labels, self.cfg.seg_epochs, self.cfg.seg_lr,
                                         self.cfg.seed, self.cfg.seg_batch)
        ckpt, losses = self.path("segmentor.vck"), self.path("segmentor_losses.csv")
        save_checkpoint(ckpt, model.state_dict(), meta={"kind": "segmentor", "seed": self.cfg.seed,
                                                         "widths": list(model.widths)})
        with open(losses, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "bce"])
            writer.writerows([e, repr(v)] for e, v in enumerate(history))
        return self._record("pretrain-segmentor", [ckpt, losses], {
            "parameters": model.num_parameters(), "initial_bce": history[0] if history else None,
            "final_bce": history[-1] if history else None})

    def segment(self):
        self._require("segment", [self.path("segmentor.vck")])
        os.makedirs(self.path("probmaps"), exist_ok=True)
        seg = self.load_segmentor()
        paths = self.prob_paths()
        probs = _map(lambda item: seg_forward(seg, load_image(item["image"])), self.items,
                     self.threads)
        for prob, p in zip(probs, paths):
            save_image(prob, p)
        return self._record("segment", paths, {"mean_probability": float(np.mean(probs))})

    def make_guidance(self):
        self._require("make-guidance", self.anatomy_paths() + self.prob_paths())
        os.makedirs(self.path("guidance"), exist_ok=True)
        paths = self.dist_paths()
        fallbacks = 0
        for anat, prob, p in zip(self.anatomy_paths(), self.prob_paths(), paths):
            g = fuse_guidance(load_mask(anat), np.clip(load_image(prob), 0.0, 1.0), self.cfg.eta)
            dist = patch_distribution(g, self.cfg.patch_size)
            fallbacks += dist.uniform_fallback
            write_distribution(dist, p)
        return self._record("make-guidance", paths, {"uniform_fallbacks": int(fallbacks)})

    def pretrain_mim(self):
        self._require("pretrain-mim", self.dist_paths() + [self.path("segmentor.vck")])
        images = self.images()
        dists = [read_distribution(p) for p in self.dist_paths()]
        seg = self.load_segmentor()
        mae = MAEModel(self.cfg.mae_config(images.shape[1]), seed=self.cfg.seed)
        seg_before = {k: v.copy() for k, v in seg.state_dict().items()}
        reports = pretrain_loop(mae, seg, images, dists, self.cfg.train_config())
        frozen = all(np.array_equal(seg_before[k], v) for k, v in seg.state_dict().items())
        ckpt, losses = self.path("mim.vck"), self.path("losses.csv")
        save_checkpoint(ckpt, mae.state_dict(), meta={"kind": "mae", "config": self.cfg.to_dict(),
                                                      "img_size": int(images.shape[1])})
        write_loss_log(reports, losses)
        l_mim = [r.l_mim for r in reports]
        return self._record("pretrain-mim", [ckpt, losses], {
            "steps": len(reports), "first_l_mim": l_mim[0], "last_l_mim": l_mim[-1],
            "segmentor_unchanged": bool(frozen)})

    def evaluate(self):
        self._require("eval", self.anatomy_paths() + self.prob_paths())
        rows = []
        for i, item in enumerate(self.items):
            anat = load_mask(self.anatomy_paths()[i])
            seg_mask = (load_image(self.prob_paths()[i]) > 0.5).astype(np.uint8)
            row = {"index": i, "seg_vs_pseudo_dsc": dsc(seg_mask, anat)}
            if "mask" in item:
                gt = load_mask(item["mask"])
                row.update(anatomy_dsc=dsc(anat, gt), anatomy_cldice=cldice(anat, gt),
                           seg_dsc=dsc(seg_mask, gt), seg_cldice=cldice(seg_mask, gt))
            rows.append(row)
        path = self.path("eval.csv")
        columns = list(rows[0])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([row[c] if c == "index" else repr(float(row[c])) for c in columns])
        means = {f"mean_{c}": float(np.mean([r[c] for r in rows])) for c in columns if c != "index"}
        return self._record("eval", [path], means)

    # -- driver ---------------------------------------------------------------
    def run(self, stages=STAGES):
        handlers = {
            "extract-anatomy": self.extract_anatomy,
            "pretrain-segmentor": self.pretrain_segmentor,
            "segment": self.segment,
            "make-guidance": self.make_guidance,
            "pretrain-mim": self.pretrain_mim,
            "eval": self.evaluate,
        }
        for stage in stages:
            if stage not in handlers:
                raise StageError(stage, f"unknown stage (expected one of {', '.join(STAGES)})")
        self.cfg.save(self.path("config.json"))
        for stage in stages:
            log.info("running stage %s", stage)
            try:
                handlers[stage]()
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, exc) from exc
        return self.write_summary()

    def write_summary(self):
        blocks = {}
        for stage in STAGES:
            p = self.path("stages", f"{stage}.json")
            if os.path.exists(p):
                with open(p) as fh:
                    blocks[stage] = json.load(fh)
        summary = {"config": self.cfg.to_dict(), "manifest": os.path.basename(self.manifest_path),
                   "n_items": len(self.items), "stages": blocks}
        path = self.path("summary.json")
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def run_pipeline(config, manifest_path, out_dir, stages=STAGES, threads=1):
    """Run `stages` and return the path of ``summary.json``."""
    if not isinstance(config, PipelineConfig):
        config = PipelineConfig.from_dict(config)
    return Pipeline(config, manifest_path, out_dir, threads).run(stages)
