"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The learning criteria (8 to 11) share one seeded pipeline run through the CLI:
gen-data, pretrain-desc, train-policy (T = 5 with 1 and 2 workers, T = 2, and
0 steps for the untrained baseline) and eval on a held-out set.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from traqpoint import evaluation as ev
from traqpoint import gradcheck
from traqpoint import io as tqio
from traqpoint.cli import main
from traqpoint.diffcore import spatial_softmax
from traqpoint.fast import fast_detect
from traqpoint.geometry import backproject, overlap_ratio, project_pixels, project_world
from traqpoint.inference import nms_mask, soft_mnn_match
from traqpoint.nets import dual_softmax, load_checkpoint
from traqpoint.reward import distinct_reward, rank_prop, rank_reward
from traqpoint.rng import stream
from traqpoint.sampling import GLOBAL, hybrid_sample, sample_global
from traqpoint.scenegen import (
    PlanarScene,
    build_sequence,
    generate_dataset,
    procedural_texture,
    rotation_from_axis_angle,
    write_textures,
)

from conftest import ACCEPTANCE_LINES
from test_fast import brute_force_fast, random_image
from test_reward import assert_matches_oracle, random_case

HELD_OUT = {"image_size": 128, "seq_len": 5, "sequences_per_scene": 1,
            "chain": True, "ov_min": 0.3, "ov_max": 0.9}


def record(n, ok, detail, started):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.perf_counter() - started:.1f} s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def cli(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"traqpoint {' '.join(map(str, args))} exited with {code}"


def summary(metrics_csv):
    return tqio.read_csv(metrics_csv)[-1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    cli("gen-data", "--out", data, "--seed", 1)
    held = root / "held"
    write_textures(held / "textures", 10, seed=99)
    held_manifest = generate_dataset(10, held / "textures", HELD_OUT, rng_seed=99, out_dir=held)
    manifest = data / "manifest.txt"

    cli("pretrain-desc", "--data", manifest, "--out", root / "desc", "--seed", 1)
    cli("pretrain-desc", "--data", manifest, "--out", root / "desc_again", "--seed", 1)
    desc = root / "desc" / "descriptor.tqck"

    runs = {
        "t5": [],
        "t5_workers2": ["--workers", 2],
        "t2": ["--seq-len", 2],
        "untrained": ["--steps", 0],
    }
    for name, extra in runs.items():
        cli("train-policy", "--data", manifest, "--desc", desc, "--out", root / name, "--seed", 1, *extra)
        cli("eval", "--ckpt", root / name / "policy.tqck", "--desc", desc, "--eval-data", held_manifest,
            "--out", root / name / "eval")
    cli("eval", "--ckpt", root / "t5" / "policy.tqck", "--desc", desc, "--eval-data", held_manifest,
        "--out", root / "t5" / "eval_workers2", "--workers", 2)
    return root, held_manifest


def test_criterion_01_reward_formulas():
    t0 = time.perf_counter()
    vals = np.random.default_rng(0).permutation(100).astype(float).reshape(10, 10)
    y, x = np.argwhere(vals == 90)[0]
    vals[y, x], vals[5, 5] = vals[5, 5], vals[y, x]
    logits = np.full((20, 20), -1.0)
    logits[5:15, 5:15] = vals
    rp = rank_prop(logits, (10, 10))
    checks = [
        rp == 0.9,
        rank_reward(rp, 0.2) == 0.875,
        rank_reward(0.9, 0.2) == 0.875,
        distinct_reward(0.425, 0.85) == 0.5,
        all(rank_reward(v) == 0.0 for v in (0.0, 0.1, 0.2)),
        all(distinct_reward(v) == 0.0 for v in (0.85, 0.9, 1.0, 2.0)),
    ]
    ok = record(1, all(checks), f"{sum(checks)}/{len(checks)} exact reward values", t0)
    assert ok


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(range(1, 21))
    worst = max(results, key=lambda r: r.rel_error)
    bad = [r for r in results if not r.passed]
    ok = record(2, not bad, f"{len(results)} checks over 20 seeds, worst rel error "
                f"{worst.rel_error:.2e} ({worst.name})", t0)
    assert ok, bad


def test_criterion_03_geometry():
    t0 = time.perf_counter()
    tilt = rotation_from_axis_angle((1.0, 0.3, 0.0), math.radians(15)) @ np.array([0.0, 0.0, 1.0])
    scene = PlanarScene(procedural_texture(0, 256), normal=tilt, distance=4.0)
    round_trip = depth_err = overlap_gap = 0.0
    for seed in range(5):
        seq = build_sequence(scene, T=3, rng_seed=(3, seed), size=(64, 64))
        ref = seq.reference
        for tgt in seq.targets:
            px = np.stack(np.meshgrid(np.arange(64), np.arange(64)), -1).reshape(-1, 2)
            xy, z, inb, cons = project_pixels(ref, tgt, px)
            vis = inb & cons
            back, _ = project_world(ref, backproject(tgt, xy[vis], z[vis]))
            round_trip = max(round_trip, float(np.abs(back - px[vis]).max()))
            overlap_gap = max(overlap_gap, abs(overlap_ratio(ref, tgt, stride=1) - overlap_ratio(ref, tgt)))
        for fr in seq.frames:
            k, pose = fr.intrinsics, fr.pose
            ys, xs = np.nonzero(fr.depth > 0)
            rays = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones(len(xs))], axis=1) @ pose.rotation
            analytic = (scene.distance - scene.normal @ pose.center) / (rays @ scene.normal)
            depth_err = max(depth_err, float(np.abs(fr.depth[ys, xs] - analytic).max()))
    ok = round_trip < 1e-6 and depth_err < 1e-9 and overlap_gap <= 0.05
    record(3, ok, f"round trip {round_trip:.1e} px, depth {depth_err:.1e}, overlap gap {overlap_gap:.3f}", t0)
    assert ok


def test_criterion_04_fast():
    t0 = time.perf_counter()
    equal = 0
    for seed in range(50):
        img = random_image(seed)
        xy, _ = fast_detect(img, 0.08)
        equal += {tuple(p) for p in xy.tolist()} == brute_force_fast(img, 0.08)[0]
    ok = record(4, equal == 50, f"{equal}/50 images with identical corner sets", t0)
    assert ok


def test_criterion_05_compute_tracks_oracle():
    t0 = time.perf_counter()
    scene = PlanarScene(procedural_texture(21, 256), distance=4.0)
    failures = []
    for seed in range(20):
        try:
            assert_matches_oracle(*random_case(seed, scene), workers=1 + seed % 2)
        except AssertionError as exc:
            failures.append((seed, exc))
    ok = record(5, not failures, f"{20 - len(failures)}/20 random sequences equal the oracle exactly", t0)
    assert ok, failures


def test_criterion_06_sampling():
    t0 = time.perf_counter()
    logits = np.random.default_rng(6).normal(size=(128, 128)) * 3
    prob = spatial_softmax(logits)
    acts = hybrid_sample(logits, prob, 192, 8, stream(1, "acceptance"))
    sizes = len(acts) == 256 and np.count_nonzero(acts.source == GLOBAL) == 192
    cells = sorted(acts.source[acts.source >= 0].tolist()) == list(range(64))
    logp = float(np.abs(np.exp(acts.log_prob) - prob[acts.xy[:, 1], acts.xy[:, 0]]).max())
    u = sample_global(np.full((16, 16), 1 / 256), 10_000, stream(1, "uniform16"))
    p = chisquare(np.bincount(u.xy[:, 1] * 16 + u.xy[:, 0], minlength=256)).pvalue
    ok = sizes and cells and logp <= 1e-9 and p > 0.01
    record(6, ok, f"256 samples, 64 cells covered, log-prob error {logp:.1e}, chi-square p = {p:.3f}", t0)
    assert ok


def test_criterion_07_inference():
    t0 = time.perf_counter()
    close = 0
    for seed in range(100):
        s = np.round(np.random.default_rng(seed).random((32, 32)), 1 if seed % 2 else 6)
        ys, xs = np.nonzero(nms_mask(s))
        pts = np.stack([xs, ys], axis=1)
        d = np.abs(pts[:, None] - pts[None]).max(axis=2)
        np.fill_diagonal(d, 99)
        close += int((d < 3).sum())
    bad_mutual = asym = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(rng.integers(1, 40), 16))
        b = rng.normal(size=(rng.integers(1, 40), 16))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        prob, _ = dual_softmax(a @ b.T, 0.1)
        ab = soft_mnn_match(a, b)
        for m in ab:
            bad_mutual += not (prob[m.index_a].argmax() == m.index_b and prob[:, m.index_b].argmax() == m.index_a
                               and m.probability >= 0.01)
        ba = {(m.index_b, m.index_a) for m in soft_mnn_match(b, a)}
        asym += {(m.index_a, m.index_b) for m in ab} != ba
    ok = close == 0 and bad_mutual == 0 and asym == 0
    record(7, ok, f"NMS pairs closer than 3: {close}; non-mutual matches: {bad_mutual}; "
           f"asymmetric pairs: {asym}", t0)
    assert ok


@pytest.mark.slow
def test_criterion_08_descriptor_pretraining(pipeline):
    t0 = time.perf_counter()
    root, held_manifest = pipeline
    losses = [float(r["loss"]) for r in tqio.read_csv(root / "desc" / "pretrain_loss.csv")]
    ratio = np.mean(losses[-100:]) / np.mean(losses[:100])
    desc = load_checkpoint(root / "desc" / "descriptor.tqck", "descriptor")
    good = total = 0
    for seq in tqio.load_dataset(held_manifest):
        fr = seq.frames
        feats = []
        for f in fr:
            xy, _ = fast_detect(f.image)
            feats.append(ev.FrameFeatures(xy, ev.describe(f, xy, desc)))
        for i in range(len(fr) - 1):
            g, t = ev.precision_counts(fr[i], fr[i + 1], feats[i], feats[i + 1], 2.0)
            good += g
            total += t
    precision = good / total if total else 0.0
    ok = len(losses) == 500 and precision >= 0.7 and ratio < 0.5
    record(8, ok, f"held-out precision at 2 px {precision:.3f} over {total} matches, "
           f"loss ratio {ratio:.3f}", t0)
    assert ok


@pytest.mark.slow
def test_criterion_09_policy_learning(pipeline):
    t0 = time.perf_counter()
    root, _ = pipeline
    rewards = [float(r["reward"]) for r in tqio.read_csv(root / "t5" / "train_log.csv")]
    ratio = np.mean(rewards[-100:]) / np.mean(rewards[:100])
    trained = float(summary(root / "t5" / "eval" / "metrics.csv")["aktl"])
    untrained = float(summary(root / "untrained" / "eval" / "metrics.csv")["aktl"])
    ok = len(rewards) == 2000 and ratio >= 1.3 and trained > untrained
    record(9, ok, f"R(A) trailing/leading {ratio:.3f} (need >= 1.3); held-out AKTL trained "
           f"{trained:.4f} vs untrained {untrained:.4f}", t0)
    assert ok


@pytest.mark.slow
def test_criterion_10_sequential_vs_pairwise(pipeline):
    t0 = time.perf_counter()
    root, _ = pipeline
    t5 = float(summary(root / "t5" / "eval" / "metrics.csv")["aktl"])
    t2 = float(summary(root / "t2" / "eval" / "metrics.csv")["aktl"])
    ok = t5 >= t2
    record(10, ok, f"held-out AKTL T=5 {t5:.4f} vs T=2 {t2:.4f}", t0)
    assert ok


@pytest.mark.slow
def test_criterion_11_determinism(pipeline):
    t0 = time.perf_counter()
    root, _ = pipeline

    def same(a, b):
        return open(root / a, "rb").read() == open(root / b, "rb").read()

    pairs = [
        ("desc/descriptor.tqck", "desc_again/descriptor.tqck"),
        ("desc/pretrain_loss.csv", "desc_again/pretrain_loss.csv"),
        ("t5/policy.tqck", "t5_workers2/policy.tqck"),
        ("t5/train_log.csv", "t5_workers2/train_log.csv"),
        ("t5/rewards.csv", "t5_workers2/rewards.csv"),
        ("t5/eval/metrics.csv", "t5_workers2/eval/metrics.csv"),
        ("t5/eval/metrics.csv", "t5/eval_workers2/metrics.csv"),
    ]
    differ = [a for a, b in pairs if not same(a, b)]
    ok = not differ
    record(11, ok, f"{len(pairs) - len(differ)}/{len(pairs)} artefact pairs byte-identical"
           + (f"; differ: {differ}" if differ else ""), t0)
    assert ok
