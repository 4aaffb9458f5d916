"""One test per acceptance criterion; each records a PASS/FAIL line shown in the terminal summary."""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import helpers
import oracles
from helpers import SEPARATION_GRID, best_iou, n_params, noisy_output, randomize_statistics
from nulite.encoder import EncoderConfig, build_encoder, reparameterize
from nulite.losses import TERMS, dice_loss, focal_tversky_loss
from nulite.metrics import (
    MatchResult,
    centroids,
    detection_scores,
    evaluate_image,
    aggregate_report,
    match_instances,
    panoptic_quality,
    pq_binary_and_multiclass,
)
from nulite.network import NetworkConfig, build_network, predict, reparameterize_network
from nulite.postprocess import PostprocessParams, foreground, instance_segment, postprocess
from nulite.profiler import PUBLISHED_NULITE_REP, _calibrated, profile, published_report, reference_report, speedup_table
from nulite.runtime import core_detection_f1, infer_tiled, plan_tiles
from nulite.runtime.config import Config, TrainConfig, load_config
from nulite.runtime.train import load_checkpoint, save_checkpoint, train
from nulite.synthetic import disk_dataset, disk_pair, disk_sample, ideal_output

ROOT = Path(__file__).resolve().parents[1]


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    helpers.ACCEPTANCE[n] = line
    print(line)
    return ok


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def sig3(x):
    return float(f"{x:.3g}")


def test_criterion_1_decoder_shapes():
    t0 = time.perf_counter()
    bad = []
    for name in ("T8", "S12", "MA36"):
        cfg = NetworkConfig(EncoderConfig.from_variant(name), 6)
        trace = {}
        with torch.no_grad():
            build_network(cfg, seed=0).eval()(torch.zeros(1, 3, 256, 256), trace=trace)
        want = oracles.decoder_rows(cfg.encoder_config.base_width, 256, 256, 6)
        bad += [f"{name}:{row}" for row in want if trace.get(row) != want[row]]
    dt = time.perf_counter() - t0
    ok = not bad and dt < 60
    record(1, ok, f"8 rows x Z in (48, 64, 76) at 256^2, mismatches={bad or 0}, {dt:.1f}s")
    assert ok


def test_criterion_2_reparameterization():
    t0 = time.perf_counter()
    worst, fewer = 0.0, True
    for name in ("T8", "S12", "SA12"):
        for seed in range(100):
            enc = randomize_statistics(build_encoder(name, seed=seed), seed)
            fused = reparameterize(enc)
            x = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(seed))
            with torch.no_grad():
                worst = max(worst, max(float((a - b).abs().max()) for a, b in zip(enc(x), fused(x))))
            fewer &= n_params(fused) < n_params(enc)
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and fewer and dt < 300
    record(2, ok, f"300 fused encoders, max |diff| = {worst:.2e}, fewer params = {fewer}, {dt:.0f}s")
    assert ok


def test_criterion_3_losses():
    grad_err = max(helpers.gradient_relative_error(name) for name in TERMS)
    t = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    t[..., :3] = 1.0
    half = torch.zeros_like(t)
    half[..., :3, :] = 1.0
    cases = {
        "dice disjoint": (float(dice_loss(1 - t, t)), 1.0),
        "ftl disjoint": (float(focal_tversky_loss(1 - t, t)), 1.0),
        "dice identical": (float(dice_loss(t, t)), 0.0),
        "ftl identical": (float(focal_tversky_loss(t, t)), 0.0),
        "dice half": (float(dice_loss(half, t)), 0.5),
        "tversky half": (float(focal_tversky_loss(half, t, 0.7, 0.3, 1.0)), 0.5),
    }
    closed = max(abs(a - b) for a, b in cases.values())
    ok = grad_err < 1e-2 and closed <= 1e-6
    record(3, ok, f"{len(TERMS)} terms, max relative gradient error = {grad_err:.1e}, "
                  f"closed-form max error = {closed:.1e}")
    assert ok


def test_criterion_4_metrics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    mismatches = 0
    for _ in range(200):
        gt, pred = oracles.random_instance_pair(rng)
        gt_t, pred_t = oracles.random_types(gt, rng, 4), oracles.random_types(pred, rng, 4)
        m = match_instances(gt, pred)
        tp, fp, fn = oracles.match(gt, pred)
        mismatches += (m.tp_pairs, m.fp_ids, m.fn_ids) != (tp, fp, fn)
        mismatches += not all(same(a, b) for a, b in zip(panoptic_quality(m), oracles.pq(tp, fp, fn)))
        got = pq_binary_and_multiclass(gt, gt_t, pred, pred_t, 4)
        want = oracles.bpq_mpq(gt, gt_t, pred, pred_t, 4)
        mismatches += not (same(got[0], want[0]) and same(got[1], want[1]))
        mismatches += not all(same(a, b) for c in range(1, 4) for a, b in zip(got[2][c], want[2][c]))
        d = detection_scores(centroids(gt, gt_t), centroids(pred, pred_t), 3, 4)
        w = oracles.detection(oracles.exact_centroids(gt, gt_t), oracles.exact_centroids(pred, pred_t), 3, 4)
        mismatches += (d.precision, d.recall, d.f1, d.accuracy, d.per_class) != (
            w["precision"], w["recall"], w["f1"], w["accuracy"], w["per_class"])
    gt = np.zeros((1, 10), dtype=np.int32)
    gt[0, :5] = 1
    pred = np.zeros_like(gt)
    pred[0, :3] = 1
    h1 = panoptic_quality(match_instances(gt, pred))
    h2 = panoptic_quality(MatchResult([(1, 1, 0.8)], [2], [2]))
    hand = h1[0] == 1.0 and abs(h1[1] - 0.6) < 1e-12 and abs(h1[2] - 0.6) < 1e-12 \
        and h2[0] == 0.5 and abs(h2[2] - 0.4) < 1e-12
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and hand and dt < 120
    record(4, ok, f"200 random maps, oracle mismatches = {mismatches}, hand cases = {hand}, {dt:.1f}s")
    assert ok


def test_criterion_5_separation():
    separated = 0
    for r, frac, angle in SEPARATION_GRID:
        gt = disk_pair(r, r, 2 * r * frac, angle, size=64)
        inst = instance_segment(ideal_output(gt))
        separated += inst.max() == 2 and best_iou(gt, inst, 1) >= 0.9 and best_iou(gt, inst, 2) >= 0.9
    inst, nuclei = postprocess(ideal_output(np.zeros((32, 32), dtype=np.int32)))
    empty = not inst.any() and nuclei == []
    invariants = 0
    params = PostprocessParams()
    for seed in range(50):
        out = noisy_output(seed)
        inst = instance_segment(out, params)
        ids = np.unique(inst)
        invariants += bool(np.array_equal(inst > 0, foreground(out.np_logits, params))
                           and np.array_equal(ids, np.arange(ids.size))
                           and np.array_equal(inst, instance_segment(out, params)))
    ok = separated == len(SEPARATION_GRID) and empty and invariants == 50
    record(5, ok, f"separated {separated}/{len(SEPARATION_GRID)} disk pairs (IoU >= 0.9), "
                  f"empty = {empty}, invariants {invariants}/50")
    assert ok


def test_criterion_6_profiler():
    t0 = time.perf_counter()
    measured = {n: profile(n, sizes=(256, 1024)) for n in ("NuLite-T", "NuLite-M", "NuLite-H")}
    checks, notes = {}, []
    for name, bb in (("NuLite-T", "S12"), ("NuLite-M", "SA24"), ("NuLite-H", "SA36")):
        r, pub = measured[name], PUBLISHED_NULITE_REP[bb]
        dp = r.params_millions / pub["params_millions"] - 1
        dg = r.gflops[256] / pub["gflops"][256] - 1
        checks[f"{name} params"] = abs(dp) <= 0.10
        checks[f"{name} gflops"] = abs(dg) <= 0.10
        notes.append(f"{name} {r.params_millions:.2f}M ({dp:+.1%}) {r.gflops[256]:.2f}G ({dg:+.1%})")
    ratio = measured["NuLite-T"].gflops[1024] / measured["NuLite-T"].gflops[256]
    checks["S12 1024/256"] = abs(ratio - 16.0) <= 0.5
    params_x = speedup_table(reference_report("cellvit-sam-h"), published_report("S12"))["params"]
    flops_x = speedup_table(reference_report("cellvit256"), published_report("MA36"))["gflops@256"]
    checks["58.27x"] = sig3(params_x) == sig3(58.27)
    checks["4.08x"] = sig3(flops_x) == sig3(4.08)
    dt = time.perf_counter() - t0
    checks["runtime"] = dt < 120
    failed = [k for k, v in checks.items() if not v]
    detail = (f"{'; '.join(notes)}; 1024/256 = {ratio:.2f}; params speedup {params_x:.4f} -> {sig3(params_x)}; "
              f"gflops speedup {flops_x:.4f} -> {sig3(flops_x)} (published 4.08); failed = {failed or 0}; {dt:.0f}s")
    record(6, not failed, detail)
    if failed == ["4.08x"]:
        pytest.xfail("132.89 / 32.53 = 4.0852 rounds to 4.09, not the published 4.08")
    assert not failed


def test_criterion_7_tiling():
    t0 = time.perf_counter()
    image = disk_sample("big", 1024, count=600, radius_range=(7, 12), seed=0).rgb
    net = reparameterize_network(_calibrated(build_network("NuLite-T", seed=0)))
    native, _ = infer_tiled(net, image, plan_tiles(1024, 1024, 1024, 0))
    grid = plan_tiles(1024, 1024, 256, 64)
    tiled, _ = infer_tiled(net, image, grid)
    f1 = core_detection_f1(native, tiled, grid)
    dt = time.perf_counter() - t0
    ok = f1 >= 0.95 and dt < 300
    record(7, ok, f"random-weight NuLite-T, 1024^2 native vs 25 tiles of 256 (64 overlap), "
                  f"core F1 = {f1:.3f} ({native.max()} vs {tiled.max()} instances), {dt:.0f}s")
    assert ok


def test_criterion_8_smoke_training(tmp_path):
    t0 = time.perf_counter()
    data = disk_dataset(32, size=64, count=3, radius_range=(7, 10), seed=0)
    cfg = Config(train=TrainConfig(batch_size=4, epochs=20, seed=0, augment=True))
    res = train(cfg, data, out_dir=tmp_path)
    losses = res.epoch_losses
    decreasing = all(a > b for a, b in zip(losses[:5], losses[1:5]))
    net = res.network.eval()
    results = []
    for s in data:
        inst, nuclei = postprocess(predict(net, s.rgb, cfg.data.mean, cfg.data.std), cfg.postprocess)
        results.append(evaluate_image(s.instance_map, s.type_map, inst, {n.id: n.class_id for n in nuclei}, 6, s.id))
    bpq = aggregate_report(results, 6).bpq
    save_checkpoint(tmp_path / "final.pt", net, cfg, 19)
    back, cfg_back, _ = load_checkpoint(tmp_path / "final.pt")
    exact = cfg_back == cfg and all(torch.equal(a, b) for a, b in zip(net.state_dict().values(),
                                                                        back.state_dict().values()))
    lr_ok = all(abs(lr - 3e-4 * 0.85 ** k) <= 1e-12 * 3e-4 for k, lr in enumerate(res.lrs)) \
        and all(abs(cfg.train.lr_at(k) - 3e-4 * 0.85 ** k) <= 1e-15 for k in range(20))
    dt = time.perf_counter() - t0
    ok = decreasing and bpq >= 0.5 and exact and lr_ok and dt < 900
    record(8, ok, f"losses {' > '.join(f'{v:.3f}' for v in losses[:5])} ... {losses[-1]:.3f}, "
                  f"train bPQ = {bpq:.3f}, checkpoint bit-exact = {exact}, lr schedule = {lr_ok}, {dt:.0f}s")
    assert ok


def test_criterion_9_full_scale_documented():
    cfg = load_config(str(ROOT / "configs" / "pannuke_full.toml"))
    t = cfg.train
    ok = (t.batch_size, t.epochs, t.beta1, t.beta2, t.lr, t.weight_decay, t.gamma) == (
        16, 130, 0.85, 0.95, 3e-4, 1e-4, 0.85)
    record(9, ok, "PanNuke and external-dataset scores are NOT reproduced here (they need full GPU training); "
                  f"configs/pannuke_full.toml ships the full-scale settings, settings match = {ok}")
    assert ok
