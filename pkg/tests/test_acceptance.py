"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the pytest summary
under "acceptance criteria".  Calibrated thresholds quote the value measured
on the seed-0 reference run next to the assertion.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

import primitive_cases
from acceptance_log import criterion
from oracles import cldice_by_hand, components, inclusion_probabilities, loop_distribution
from oracles import zhang_suen_loop

from angiomim import nn
from angiomim import rng as rngmod
from angiomim.cli import main
from angiomim.config import PipelineConfig
from angiomim.guidance import PatchDistribution, fuse_guidance, patch_distribution
from angiomim.masking import (MaskSchedule, guidance_intensity, sample_mask,
                              weighted_sample_without_replacement)
from angiomim.metrics import cldice, cldice_from_skeletons, count_components, dsc, skeletonize_batch
from angiomim.mim import MAEConfig, MAEModel, TrainConfig, mim_loss, pretrain_loop, read_loss_log
from angiomim.nn import load_checkpoint
from angiomim.segmentor import SegmentorModel, seg_forward
from angiomim.synth import SynthConfig, gen_tube_image, read_manifest
from angiomim.image import load_image
from angiomim.vesselness import extract_anatomy, multiscale_vesselness


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """Synthetic set of 20 images and one full 200-step run-pipeline invocation."""
    root = tmp_path_factory.mktemp("acceptance")
    assert main(["gen-synthetic", "--n", "20", "--size", "64", "--seed", "0",
                 "--out", str(root / "data")]) == 0
    config = root / "config.json"
    config.write_text(json.dumps({"epochs": 10, "seed": 0}))
    start = time.time()
    assert main(["run-pipeline", "--config", str(config), "--manifest",
                 str(root / "data" / "manifest.json"), "--out", str(root / "run1"),
                 "--threads", "2"]) == 0
    return {"root": root, "config": config, "run": root / "run1", "seconds": time.time() - start}


@criterion(1, "schedule exactness")
def test_c1_schedule_exactness():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        b0, bE = rng.random(2)
        E = 2 * int(rng.integers(1, 500))
        s = MaskSchedule(b0, bE, E, 0.5)
        assert guidance_intensity(0, s) == b0
        assert guidance_intensity(E, s) == bE
        worst = max(worst, abs(guidance_intensity(E // 2, s) - 0.5 * (b0 + bE)))
    return worst <= 1e-12, f"endpoints exact on 500 schedules, worst midpoint error {worst:.1e}"


@criterion(2, "distribution correctness")
def test_c2_distribution_vs_loop_oracle():
    start = time.time()
    rng = rngmod.stream(0, 99, 2)
    worst_sum = worst_w = 0.0
    for i in range(1000):
        p = (4, 8, 16)[i % 3]
        g = rng.random((32, 32)) * (rng.random((32, 32)) < rng.uniform(0.05, 1.0))
        if not g.any():
            g[0, 0] = 1.0
        w = patch_distribution(g, p).weights
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        worst_w = max(worst_w, np.max(np.abs(w - loop_distribution(g, p))))
    secs = time.time() - start
    ok = worst_sum <= 1e-9 and worst_w <= 1e-9 and secs < 10
    return ok, f"1000 maps, |sum-1| <= {worst_sum:.1e}, max weight error {worst_w:.1e}, {secs:.1f}s"


@criterion(3, "sampling fidelity")
def test_c3_inclusion_frequencies():
    start = time.time()
    w = np.array([0.4, 0.3, 0.2, 0.1, 0.0])
    exact = inclusion_probabilities(w, 2)
    trials = 100_000
    gen = rngmod.stream(0, rngmod.MASKING, 99)
    counts = np.zeros(5)
    for _ in range(trials):
        counts[weighted_sample_without_replacement(w, 2, gen)] += 1
    freq = counts / trials
    se = np.sqrt(exact * (1 - exact) / trials)
    z = np.where(se > 0, np.abs(freq - exact) / np.where(se > 0, se, 1), 0)
    secs = time.time() - start
    ok = bool(np.all(z <= 3)) and counts[4] == 0 and secs < 60
    return ok, (f"freq {np.round(freq, 4).tolist()} vs exact {np.round(exact, 4).tolist()}, "
                f"max |z| {z.max():.2f}, {secs:.1f}s")


def _vessel_guidance():
    """A fixed guidance map: one synthetic tube, faint uniform probability elsewhere."""
    _, gt = gen_tube_image(SynthConfig(size=64, tubes=(1, 1)), rngmod.stream(0, rngmod.SYNTH, 0))
    g = fuse_guidance(gt, np.full(gt.shape, 0.002), eta=0.5)
    dist = patch_distribution(g, 8)
    vessel = gt.reshape(8, 8, 8, 8).swapaxes(1, 2).reshape(64, 64).any(axis=1)
    return dist, vessel


@criterion(4, "guided masking raises vessel coverage")
def test_c4_vessel_patch_count_monotone():
    start = time.time()
    dist, vessel = _vessel_guidance()
    n = dist.n
    share, mass = vessel.mean(), dist.weights[vessel].sum()
    assert share < 0.3 and mass > 0.9, (share, mass)
    schedule = MaskSchedule(0.0, 0.5, 5, 0.5)
    betas, means, zero_counts = [], [], None
    for e in range(6):
        gen = rngmod.stream(0, rngmod.MASKING, 1, e)
        counts = np.array([vessel[sample_mask(dist, schedule, e, n, gen).masked_indices].sum()
                           for _ in range(1000)])
        betas.append(guidance_intensity(e, schedule))
        means.append(counts.mean())
        if e == 0:
            zero_counts = counts
    rho = stats.spearmanr(betas, means).statistic
    # uniform masking of k = 32 of 64 patches: vessel count is hypergeometric
    hyper = stats.hypergeom(n, int(vessel.sum()), 32)
    z = (zero_counts.mean() - hyper.mean()) / np.sqrt(hyper.var() / len(zero_counts))
    p_value = 2 * stats.norm.sf(abs(z))
    secs = time.time() - start
    ok = rho > 0.9 and p_value > 0.01 and secs < 120
    return ok, (f"vessel patches {vessel.sum()}/{n} carry {mass:.3f} of mass; mean counts "
                f"{np.round(means, 2).tolist()}; Spearman {rho:.3f}; beta=0 vs uniform "
                f"z={z:.2f} p={p_value:.3f}; {secs:.1f}s")


@criterion(5, "Frangi pipeline")
def test_c5_frangi_pipeline():
    start = time.time()
    params = PipelineConfig().vesselness_params()
    for shape in ((64, 64), (37, 53)):
        for value in (0.0, 0.25, 0.8, 1.0):
            img = np.full(shape, value)
            v = multiscale_vesselness(img, params)
            assert np.all(v == 0.0) and not extract_anatomy(img, params).any()
    scores, oracle_scores, comps = [], [], []
    cfg = SynthConfig(size=64, seed=0)
    for i in range(10):
        img, gt = gen_tube_image(cfg, rngmod.stream(0, rngmod.SYNTH, i))
        mask = extract_anatomy(img, params)
        scores.append(cldice(mask, gt))
        oracle_scores.append(cldice_by_hand(mask, gt, zhang_suen_loop(mask), zhang_suen_loop(gt)))
        comps.append(components(mask))
    secs = time.time() - start
    # seed-0 calibration: mean clDice 0.999, min 0.985 (oracle and implementation agree)
    ok = (np.mean(oracle_scores) >= 0.7 and np.mean(scores) >= 0.7
          and all(c <= 1 for c in comps) and secs < 60)
    return ok, (f"constant images give V == 0 and empty masks; mean clDice {np.mean(scores):.3f} "
                f"(oracle {np.mean(oracle_scores):.3f}, min {np.min(scores):.3f}); "
                f"components {sorted(set(comps))}; {secs:.1f}s")


def _mim_case(dtype):
    cfg = MAEConfig(img_size=32, patch_size=8, embed_dim=16, num_heads=2, decoder_dim=16)
    img = gen_tube_image(SynthConfig(size=32), rngmod.stream(0, rngmod.SYNTH, 0))[0]
    mae, seg = MAEModel(cfg, dtype=dtype), SegmentorModel(0, dtype=dtype)
    seg.freeze()
    uniform = PatchDistribution(np.full(16, 1 / 16), uniform_fallback=True)
    mask = sample_mask(uniform, MaskSchedule(0.0, 0.0, 1, 0.5), 0, 16, rngmod.stream(0))
    return mae, seg, img, mask


@criterion(6, "gradient integrity")
def test_c6_gradient_integrity():
    start = time.time()
    worst = {np.float32: 0.0, np.float64: 0.0}
    for name in primitive_cases.CASES:
        for dtype in worst:
            report = primitive_cases.check(name, dtype, seed=0)
            assert report.checked, name
            worst[dtype] = max(worst[dtype], report.max_rel_error)

    # full objective, 64-bit: h = 1e-4 keeps round-off below the 1e-8 error floor
    mae, seg, img, mask = _mim_case(np.float64)
    params = list(mae.named_parameters())
    sample = rngmod.stream(0, rngmod.GRADCHECK)
    r64 = nn.grad_check_report(params, lambda: mim_loss(mae, seg, img, mask)[0], h=1e-4,
                               sample_fraction=0.05, rng=sample)

    # full objective, 32-bit gradients against differences of a 64-bit copy
    mae32, seg32, _, _ = _mim_case(np.float32)
    mae32.zero_grad()
    mim_loss(mae32, seg32, img, mask)[0].backward()
    grads = [p.grad.copy() for _, p in mae32.named_parameters()]
    mae.load_state_dict({k: v.astype(np.float64) for k, v in mae32.state_dict().items()})
    seg.load_state_dict({k: v.astype(np.float64) for k, v in seg32.state_dict().items()})
    r32 = nn.grad_check_report(list(mae.named_parameters()),
                               lambda: mim_loss(mae, seg, img, mask)[0], h=1e-4,
                               sample_fraction=0.05, rng=rngmod.stream(0, rngmod.GRADCHECK),
                               analytic=grads)
    secs = time.time() - start
    ok = (worst[np.float64] < 1e-6 and worst[np.float32] < 1e-3 and r64.max_rel_error < 1e-3
          and r32.max_rel_error < 1e-3 and secs < 120)
    return ok, (f"{len(primitive_cases.CASES)} primitives: 64-bit {worst[np.float64]:.1e}, "
                f"32-bit {worst[np.float32]:.1e}; L_MIM 5% sample ({len(r64.checked)} entries): "
                f"64-bit {r64.max_rel_error:.1e}, 32-bit {r32.max_rel_error:.1e}; {secs:.1f}s")


@criterion(7, "loss additivity")
def test_c7_loss_additivity(pipeline_run):
    start = time.time()
    rows = read_loss_log(pipeline_run["run"] / "losses.csv")
    gap = max(abs(r["l_mim"] - (r["l_rec"] + r["l_cons"])) for r in rows)
    items = read_manifest(pipeline_run["root"] / "data" / "manifest.json")["items"]
    images = np.stack([load_image(it["image"]) for it in items])
    cfg = PipelineConfig(epochs=10, consistency=False)
    dists = [PatchDistribution(np.full(16, 1 / 16), uniform_fallback=True)] * len(images)
    reports = pretrain_loop(MAEModel(cfg.mae_config(64)), None, images, dists, cfg.train_config())
    off_ok = all(r.l_cons == 0.0 and r.l_mim == r.l_rec for r in reports)
    secs = time.time() - start + pipeline_run["seconds"]
    ok = len(rows) == 200 and gap < 1e-12 and len(reports) == 200 and off_ok and secs < 600
    return ok, (f"{len(rows)} steps, max |l_mim - (l_rec + l_cons)| = {gap:.1e}; "
                f"consistency off: l_cons == 0 on {len(reports)} steps")


@criterion(8, "training smoke")
def test_c8_training_smoke(pipeline_run):
    rows = read_loss_log(pipeline_run["run"] / "losses.csv")
    l_mim = np.array([r["l_mim"] for r in rows])
    early, late = l_mim[10:20].mean(), l_mim[-10:].mean()
    ratio = late / early
    cfg = PipelineConfig()
    seg = SegmentorModel(cfg.seed)
    seg.load_state_dict(load_checkpoint(pipeline_run["run"] / "segmentor.vck")[0])
    scores = []
    synth = SynthConfig(size=64, seed=0)
    for i in range(20, 28):   # held out: the run trained on items 0..19
        img, _ = gen_tube_image(synth, rngmod.stream(0, rngmod.SYNTH, i))
        pseudo = extract_anatomy(img, cfg.vesselness_params())
        scores.append(dsc(seg_forward(seg, img) > 0.5, pseudo))
    held_out = float(np.mean(scores))
    # seed-0 calibration: ratio 0.473, held-out DSC 0.827
    ok = ratio <= 0.8 and held_out >= 0.8 and pipeline_run["seconds"] < 600
    return ok, (f"L_MIM steps 10-20 {early:.4f} -> last 10 {late:.4f} (ratio {ratio:.3f}); "
                f"segmentor held-out DSC {held_out:.3f}; run {pipeline_run['seconds']:.0f}s")


@criterion(9, "metric oracles")
def test_c9_exhaustive_4x4():
    start = time.time()
    codes = np.arange(1 << 16)
    masks = ((codes[:, None] >> np.arange(16)) & 1).astype(np.uint8).reshape(-1, 4, 4)
    skels = skeletonize_batch(masks)
    again = skeletonize_batch(skels)
    idempotent = bool(np.array_equal(skels, again))
    preserved = all(count_components(m) == count_components(s) for m, s in zip(masks, skels))
    partner = np.random.default_rng(0).permutation(len(masks))
    lo, hi, self_ok = 1.0, 0.0, True
    for i in range(len(masks)):
        m, s = masks[i], skels[i]
        for j_mask, j_skel in ((m.T, s.T), (masks[partner[i]], skels[partner[i]])):
            for v in (dsc(m, j_mask), cldice_from_skeletons(m, j_mask, s, j_skel)):
                lo, hi = min(lo, v), max(hi, v)
        if m.any():
            self_ok &= dsc(m, m) == 1.0 and cldice_from_skeletons(m, m, s, s) == 1.0
    secs = time.time() - start
    ok = idempotent and preserved and self_ok and lo >= 0.0 and hi <= 1.0 and secs < 60
    return ok, (f"65536 masks: idempotent {idempotent}, components preserved {preserved}, "
                f"self-agreement {self_ok}, metric range [{lo:.3f}, {hi:.3f}]; {secs:.1f}s")


@criterion(10, "determinism")
def test_c10_rerun_is_byte_identical(pipeline_run):
    root = pipeline_run["root"]
    assert main(["run-pipeline", "--config", str(pipeline_run["config"]), "--manifest",
                 str(root / "data" / "manifest.json"), "--out", str(root / "run2"),
                 "--threads", "1"]) == 0
    names = ["losses.csv", "mim.vck", "segmentor.vck", "segmentor_losses.csv", "summary.json"]
    same = {n: (root / "run1" / n).read_bytes() == (root / "run2" / n).read_bytes() for n in names}
    different = [n for n, s in same.items() if not s]
    return not different, ("identical: " + ", ".join(names)) if not different else \
        f"differ: {', '.join(different)}"
