"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary. The modality-ordering run trains three full models at
224 px and takes about an hour on one CPU core; set FREEFLOW_SKIP_SLOW=1 to
skip it.
"""

import csv
import math
import os
import time

import numpy as np
import pytest

from freeflow.chipper import ChipSpec, GeoRaster, arrow_polygon, extract_chip, fill_polygon, world_to_pixel
from freeflow.cli import run
from freeflow.core import build_class_map, county_split
from freeflow.evaluate import PredictionRecord, discrepancy_report, within_k_accuracy
from freeflow.model import MetadataStats, ModelConfig, init_parameters, predict_proba
from freeflow.synthgen import SynthConfig, generate_dataset, sample_dataset
from freeflow.train import (AdamState, Checkpoint, TrainConfig, adam_step, batch_images,
                            cross_entropy, load_inputs, lr_schedule, metadata_matrix, objective)
from gradcheck import relative_errors

RESULTS: list[str] = []


def report(number, name, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def read_comparison(path):
    with open(path, newline="") as fh:
        return {row["variant"]: float(row["within5"]) for row in csv.DictReader(fh)}


# ---------------------------------------------------------------- 1

@pytest.mark.skipif(os.environ.get("FREEFLOW_SKIP_SLOW") == "1", reason="FREEFLOW_SKIP_SLOW=1")
def test_01_modality_ordering(tmp_path):
    # 6,500 segments split about 5,000 / 500 / 1,000 by county
    seed = "42"
    started = time.time()
    assert run(["synth", "--seed", seed, "--out-dir", str(tmp_path / "data")]) == 0
    assert run(["split", "--seed", seed, "--manifest", str(tmp_path / "data" / "manifest.jsonl"),
                "--out-dir", str(tmp_path / "split"), "--test-fraction", str(1000 / 6500),
                "--val-fraction", str(500 / 5500)]) == 0
    manifest = str(tmp_path / "split" / "manifest.jsonl")
    flags = []
    for variant in ("combined", "imagery_only", "features_only"):
        assert run(["train", "--seed", seed, "--manifest", manifest, "--variant", variant,
                    "--out-dir", str(tmp_path / variant)]) == 0
        flags += ["--checkpoint-" + variant.replace("_", "-"), str(tmp_path / variant / "checkpoint.bin")]
    assert run(["eval", "--seed", seed, "--manifest", manifest, "--out-dir", str(tmp_path / "eval")]
               + flags) == 0
    acc = read_comparison(tmp_path / "eval" / "comparison.csv")
    combined = acc["combined"]
    gap_img = combined - acc["imagery_only"]
    gap_feat = combined - acc["features_only"]
    ok = combined >= 0.80 and gap_img >= 0.05 and gap_feat >= 0.05
    report(1, "modality ordering", ok,
           f"combined {combined:.4f} (need >= 0.80), imagery_only {acc['imagery_only']:.4f}, "
           f"features_only {acc['features_only']:.4f} (each need <= combined - 0.05); "
           f"{(time.time() - started) / 60:.1f} min")


# ---------------------------------------------------------------- 2

def test_02_gradient_check():
    worst = {}
    for variant in ("combined", "imagery_only", "features_only"):
        errors = relative_errors(variant)
        name = max(errors, key=errors.get)
        worst[variant] = (name, errors[name])
    top = max(e for _, e in worst.values())
    detail = ", ".join(f"{v} {n} {e:.1e}" for v, (n, e) in worst.items())
    report(2, "gradient check", top < 1e-5, f"worst relative error per variant: {detail} (need < 1e-5)")


# ---------------------------------------------------------------- 3

def test_03_loss_sanity():
    uniform = cross_entropy(np.full((8, 79), 1 / 79), np.arange(8) * 9)
    onehot = cross_entropy(np.eye(79)[[3, 40, 78]], [3, 40, 78])
    ok = abs(uniform - 4.3694) <= 1e-3 and abs(onehot) <= 1e-6
    report(3, "loss sanity", ok, f"uniform K=79 loss {uniform:.6f} (ln 79 = 4.3694 +- 1e-3), "
                                 f"one-hot loss {abs(onehot):.1e} (0 +- 1e-6)")


# ---------------------------------------------------------------- 4

def test_04_overfit(tmp_path):
    segments = generate_dataset(SynthConfig(n_segments=32, master_seed=42), tmp_path)
    class_map = build_class_map(s.freeflow_mph for s in segments)
    cfg = ModelConfig(variant="combined", K=class_map.K)
    # constant learning rate: the default decay would freeze training after ~15 epochs
    tc = TrainConfig(lr0=0.003, decay_factor=1.0)
    params = init_parameters(cfg, seed=0)
    state = AdamState.zeros_like(params)
    images = load_inputs(segments, tmp_path, cfg)
    meta = metadata_matrix(segments, MetadataStats.from_segments(segments), cfg)
    labels = np.array([class_map.speed_to_class(s.freeflow_mph) for s in segments])
    rng = np.random.default_rng(0)
    best = math.inf
    for epoch in range(300):
        order = rng.permutation(32)
        losses = []
        for start in range(0, 32, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss, grads = objective(params, cfg, batch_images(images, idx, cfg), meta[idx],
                                    labels[idx], tc.l2_scale)
            adam_step(params, grads, state, lr_schedule(epoch, tc), tc)
            losses.append(loss)
        best = min(best, float(np.mean(losses)))
        if best < 0.05:
            break
    report(4, "overfit 32 samples", best < 0.05,
           f"training loss {best:.4f} after {epoch + 1} epochs (need < 0.05 within 300)")


# ---------------------------------------------------------------- 5

def test_05_schedule():
    cfg = TrainConfig()
    values = [lr_schedule(e, cfg) for e in (0, 5, 10)]
    ok = values == [1e-3, 1e-4, 1e-5]
    report(5, "schedule exactness", ok, f"lr(0), lr(5), lr(10) = {values!r}")


# ---------------------------------------------------------------- 6

def test_06_split_invariants():
    segments = [seg for seg, _ in sample_dataset(SynthConfig(n_segments=10_000, master_seed=42))]
    split = county_split(segments, seed=42)
    county = {s.id: s.county for s in segments}
    test_counties = {county[i] for i in split.test}
    pool_counties = {county[i] for i in split.train | split.val}
    disjoint = not (test_counties & pool_counties) and test_counties == set(split.test_counties)
    covered = len(split.train) + len(split.val) + len(split.test) == len(segments)
    test_share = len(split.test) / len(segments)
    val_share = len(split.val) / (len(split.train) + len(split.val))
    ok = disjoint and covered and 0.05 <= test_share <= 0.09 and 0.005 <= val_share <= 0.015
    report(6, "split invariants", ok,
           f"county-disjoint {disjoint}, partition {covered}, test share {test_share:.4f} "
           f"(need [0.05, 0.09]), val share of pool {val_share:.4f} (need [0.005, 0.015])")


# ---------------------------------------------------------------- 7

def _arrow_correlation(heading):
    size = 600
    raster = GeoRaster(np.zeros((size, size, 3), dtype=np.uint8), (0.0, float(size)), 1.0)
    center = raster.center()
    fill_polygon(raster.pixels, world_to_pixel(raster.origin, 1.0, arrow_polygon(center, heading, 260, 60, 160)),
                 (255, 255, 255), supersample=4)
    chip = extract_chip(raster, ChipSpec(center, heading, extent_m=400.0, out_px=224))
    ref = np.zeros((224, 224, 3), dtype=np.uint8)
    poly = arrow_polygon((200.0, 200.0), 0.0, 260, 60, 160)
    fill_polygon(ref, world_to_pixel((0.0, 400.0), 400.0 / 224, poly), (255, 255, 255), supersample=4)
    return float(np.corrcoef(chip[..., 0].ravel().astype(float), ref[..., 0].ravel().astype(float))[0, 1])


def test_07_chip_geometry():
    corr = min(_arrow_correlation(h) for h in (0.0, 0.7, 1.9, 3.3, 4.6, 5.8))
    rng = np.random.default_rng(7)
    raster = GeoRaster(rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8), (500.0, 900.0), 2.5)
    chip = extract_chip(raster, ChipSpec(raster.center(), 0.0, extent_m=raster.extent_m[0], out_px=96))
    identical = np.array_equal(chip, raster.pixels)
    report(7, "chip geometry", corr >= 0.99 and identical,
           f"min arrow correlation {corr:.4f} over 6 headings (need >= 0.99), identity bitwise {identical}")


# ---------------------------------------------------------------- 8

def test_08_metric_oracles():
    rng = np.random.default_rng(8)
    anchors = [PredictionRecord("anchor_a", 18, 20, 55), PredictionRecord("anchor_b", 27, 30, 15),
               PredictionRecord("anchor_c", 50, 50, 55)]
    records = anchors + [PredictionRecord(f"r{i}", int(p), int(t), int(l)) for i, (p, t, l) in
                         enumerate(zip(rng.integers(5, 80, 997), rng.integers(5, 80, 997),
                                       rng.integers(3, 15, 997) * 5))]
    mismatches = 0
    for k in range(0, 21):
        brute = sum(1 for r in records if abs(r.predicted_mph - r.true_mph) <= k) / len(records)
        mismatches += within_k_accuracy(records, k) != brute
    for threshold in range(0, 31):
        flagged = [(r.id, r.predicted_mph - r.posted_limit_mph) for r in records
                   if abs(r.predicted_mph - r.posted_limit_mph) > threshold]
        brute = []
        for size in sorted({abs(d) for _, d in flagged}, reverse=True):
            brute += [f for f in flagged if abs(f[1]) == size]
        got = [(d.id, d.delta) for d in discrepancy_report(records, threshold)]
        mismatches += got != brute
    ids = {d.id for d in discrepancy_report(anchors, 10)}
    anchors_ok = ids == {"anchor_a", "anchor_b"}
    report(8, "metric oracles", mismatches == 0 and anchors_ok,
           f"{mismatches} mismatches over 1000 records x 52 settings; anchors 18/55 and 27/15 "
           f"flagged, 50/55 not: {anchors_ok}")


# ---------------------------------------------------------------- 9

def test_09_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(variant="combined", K=79)
    params = init_parameters(cfg, seed=9)
    rng = np.random.default_rng(9)
    for name in params:
        params[name] += rng.normal(0.0, 0.01, params[name].shape).astype(np.float32)
    ck = Checkpoint(cfg, params, build_class_map(range(5, 84)), MetadataStats((0, 1, 15), (2, 5, 70)))
    loaded = Checkpoint.load(ck.save(tmp_path / "ck.bin"))
    images = rng.random((64, 224, 224, 3), dtype=np.float32)
    meta = rng.random((64, 3)).astype(np.float32)
    before = predict_proba(ck.params, cfg, images, meta)
    after = predict_proba(loaded.params, loaded.model_config, images, meta)
    same = np.array_equal(before, after)
    report(9, "checkpoint roundtrip", same, f"64-sample predictions bitwise identical: {same}")


# ---------------------------------------------------------------- 10

def _pipeline(root):
    small = ["--seed", "10", "--chip-px", "32", "--input-px", "32", "--n-segments", "150",
             "--county-grid", "4", "--epochs", "2", "--hidden-dim", "32"]
    assert run(["synth", "--out-dir", str(root / "data")] + small) == 0
    assert run(["split", "--manifest", str(root / "data" / "manifest.jsonl"), "--out-dir", str(root / "split"),
                "--test-fraction", "0.2", "--val-fraction", "0.15"] + small) == 0
    flags = []
    for v in ("combined", "imagery_only", "features_only"):
        assert run(["train", "--manifest", str(root / "split" / "manifest.jsonl"), "--variant", v,
                    "--out-dir", str(root / v)] + small) == 0
        flags += ["--checkpoint-" + v.replace("_", "-"), str(root / v / "checkpoint.bin")]
    assert run(["eval", "--manifest", str(root / "split" / "manifest.jsonl"), "--out-dir", str(root / "eval")]
               + flags + small) == 0
    return (root / "eval" / "comparison.csv").read_bytes()


def test_10_determinism(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    report(10, "determinism", first == second,
           f"comparison tables byte-identical: {first == second} ({first.decode().strip().replace(chr(10), '; ')})")
