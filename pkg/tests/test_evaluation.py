import math

import numpy as np
import pytest

from traqpoint import evaluation as ev
from traqpoint import nets
from traqpoint.geometry import CameraFrame, project_point
from traqpoint.scenegen import Sequence, build_sequence


def unit_rows(rng, n, d=16):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def repeated(frame, t):
    return Sequence(frame, [CameraFrame(frame.image.copy(), frame.depth.copy(), frame.intrinsics, frame.pose)
                            for _ in range(t)])


def noise_like(frame, seed):
    img = np.random.default_rng(seed).random(frame.image.shape)
    return CameraFrame(img, frame.depth.copy(), frame.intrinsics, frame.pose)


@pytest.fixture(scope="module")
def textured(plane):
    return build_sequence(plane, T=1, rng_seed=2, size=(64, 64)).reference


@pytest.fixture(scope="module")
def models():
    return nets.init_policy(0), nets.init_descriptor(0).freeze()


def test_aktl_arithmetic():
    assert ev.aktl([]) == 0.0
    assert ev.aktl([ev.EvalTrack(0, [0, 1]), ev.EvalTrack(0, [2, 3, 1, 0])]) == 3.0
    assert ev.aktl([ev.EvalTrack(0, [0, 1], verified=False)]) == 0.0
    assert ev.aktl([ev.EvalTrack(0, [0, 1], verified=False), ev.EvalTrack(1, [4])]) == 1.0


def test_link_tracks_identical_frames_random_descriptors(textured):
    rng = np.random.default_rng(0)
    xy = rng.integers(4, 60, size=(40, 2))
    feats = ev.FrameFeatures(xy, unit_rows(rng, 40))
    seq = repeated(textured, 4)
    tracks = ev.link_tracks(seq.frames, [feats] * 5)
    assert len(tracks) == 40
    assert all(t.verified and t.indices == [i] * 5 for i, t in enumerate(tracks))
    assert ev.aktl(tracks) == 5.0


def detector_features(frame, policy, rng, top_k=30):
    # detector keypoints with distinctive descriptors; an untrained descriptor branch maps
    # every pixel to nearly the same vector, which would leave matching undecided
    xy = ev.keypoint_array(ev.detect(frame.image, policy, top_k))
    return ev.FrameFeatures(xy, unit_rows(rng, len(xy)))


def test_identical_frames_give_full_length_tracks(textured, models):
    seq = repeated(textured, 4)
    feats = detector_features(textured, models[0], np.random.default_rng(1))
    tracks = ev.build_tracks(seq, *models, features=[feats] * 5)
    assert len(tracks) == 30
    assert all(t.length == 5 and t.verified for t in tracks)
    assert ev.aktl(tracks) == 5.0


def test_noise_frame_breaks_every_track(textured, models):
    rng = np.random.default_rng(2)
    frames = list(repeated(textured, 4).frames)
    frames[3] = noise_like(textured, 1)
    feats = detector_features(textured, models[0], rng)
    noise = detector_features(frames[3], models[0], rng)
    tracks = ev.build_tracks(Sequence(frames[0], frames[1:]), *models,
                             features=[feats, feats, feats, noise, feats])
    crossing = [t for t in tracks if t.verified and t.length > 1
                and t.start_frame <= 3 < t.start_frame + t.length]
    assert crossing == []
    assert any(t.verified and t.length == 3 for t in tracks)


def test_track_links_agree_with_project_point(plane, models):
    seq = build_sequence(plane, T=3, ov_min=0.5, ov_max=0.95, rng_seed=8, size=(64, 64), chain=True)
    feats = [ev.extract(f, *models, 100) for f in seq.frames]
    tracks = ev.link_tracks(seq.frames, feats)
    assert any(t.length > 1 for t in tracks)
    for t in tracks:
        s = t.start_frame
        origin = feats[s].xy[t.indices[0]]
        ok = True
        for k in range(1, t.length):
            p = project_point(seq.frames[s], seq.frames[s + k], origin)
            end = feats[s + k].xy[t.indices[k]]
            if not (p.in_bounds and p.depth_consistent and math.dist(p.target_xy, end) <= ev.EPS_PX):
                ok = False
                break
        assert t.verified == ok


def test_repeatability_identical_is_one(textured, models):
    assert ev.repeatability(repeated(textured, 3), models[0], top_k=50) == 1.0


def test_repeatability_noise_target_at_chance(textured, models):
    policy = models[0]
    ref_pts = ev.keypoint_array(ev.detect(textured.image, policy, 200))
    vals = []
    for seed in range(5):
        tgt = noise_like(textured, seed + 10)
        tgt_pts = ev.keypoint_array(ev.detect(tgt.image, policy, 200))
        rep = ev.repeatability_from_points(Sequence(textured, [tgt]), [ref_pts, tgt_pts])
        # chance: fraction of pixels within eps of some target keypoint
        ys, xs = np.mgrid[0:64, 0:64]
        d = np.hypot(xs[..., None] - tgt_pts[:, 0], ys[..., None] - tgt_pts[:, 1]).min(axis=2)
        cover = np.mean(d <= ev.EPS_PX)
        n = len(ref_pts)
        vals.append(abs(rep - cover) / math.sqrt(cover * (1 - cover) / n))
    # ref keypoints are spread by NMS, so the draws are close to independent
    assert np.mean(vals) <= 2.0


def test_repeatability_formula_on_hand_points(textured):
    seq = repeated(textured, 2)
    ref = np.array([[10, 10], [30, 30], [50, 12]])
    tgt1 = np.array([[12, 11], [40, 40]])  # hits (10, 10) only
    tgt2 = np.array([[50, 15], [30, 30], [10, 14]])  # (10, 14) is 4 px away, the others hit
    assert ev.repeatability_from_points(seq, [ref, tgt1, tgt2]) == pytest.approx(3 / 6)


def test_match_precision_identical_and_undefined(textured, models):
    policy, desc = models
    assert ev.match_precision(textured, textured, policy, desc, top_k=40) == 1.0
    empty = ev.FrameFeatures(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 64)))
    assert ev.match_precision(textured, textured, policy, desc, features=(empty, empty)) is None


def test_match_precision_random_descriptors_at_chance(textured):
    good = total = 0
    expected = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        xy = np.unique(rng.integers(0, 64, size=(60, 2)), axis=0)
        fa = ev.FrameFeatures(xy, unit_rows(rng, len(xy)))
        fb = ev.FrameFeatures(xy, unit_rows(rng, len(xy)))
        g, t = ev.precision_counts(textured, textured, fa, fb)
        good += g
        total += t
        d = np.linalg.norm(xy[:, None] - xy[None], axis=2)
        expected += t * np.mean(np.mean(d <= ev.EPS_PX, axis=1))
    p = expected / total
    assert total > 50
    assert abs(good - expected) <= 3 * math.sqrt(total * p * (1 - p)) + 1


def test_evaluate_rows_and_workers(plane, models):
    seqs = [build_sequence(plane, T=2, ov_min=0.4, ov_max=0.95, rng_seed=s, size=(48, 48), chain=True,
                           scene_id=f"s{s}") for s in range(3)]
    m1 = ev.evaluate(seqs, *models, top_k=60)
    m2 = ev.evaluate(seqs, *models, top_k=60, workers=3)
    assert repr(ev.metrics_rows(m1)) == repr(ev.metrics_rows(m2))  # repr so NaN compares equal
    rows = ev.metrics_rows(m1)
    assert [r[0] for r in rows] == ["s0", "s1", "s2", "ALL"]
    assert rows[-1][1] == ev.summary_aktl(m1)
    for m in m1:
        assert 0 <= m.repeatability <= 1
        assert m.aktl == 0 or 1 <= m.aktl <= 3
    assert ev.metrics_rows([]) == []
