"""Sequence-level metrics: greedy frame-to-frame tracks, AKTL, repeatability and
reprojection-verified match precision."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import project_pixels
from .inference import detect, keypoint_array, soft_mnn_match
from .nets import descriptor_map, sample_descriptors

EPS_PX = 3.0


@dataclass
class EvalTrack:
    start_frame: int
    indices: list = field(default_factory=list)  # keypoint index per frame, consecutive
    verified: bool = True

    @property
    def length(self):
        return len(self.indices)


@dataclass
class FrameFeatures:
    xy: np.ndarray  # (N, 2) int
    desc: np.ndarray  # (N, D)


def describe(frame, xy, desc_params=None, dmap=None):
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    if len(xy) == 0:
        return np.zeros((0, 64))
    dmap = dmap if dmap is not None else descriptor_map(frame.image, desc_params)
    return sample_descriptors(dmap, xy)[0]


def extract(frame, policy, desc, top_k):
    xy = keypoint_array(detect(frame.image, policy, top_k))
    return FrameFeatures(xy, describe(frame, xy, desc))


def _reprojects_to(src_frame, dst_frame, src_xy, dst_xy, eps_px):
    """Per pair: is the ground-truth reprojection of src_xy visible and within eps of dst_xy?"""
    if len(src_xy) == 0:
        return np.zeros(0, dtype=bool)
    txy, _, inb, cons = project_pixels(src_frame, dst_frame, src_xy)
    with np.errstate(invalid="ignore"):
        close = np.linalg.norm(txy - np.asarray(dst_xy, dtype=np.float64), axis=1) <= eps_px
    return inb & cons & close


def link_tracks(frames, features, eps_px=EPS_PX, threshold=0.01, temperature=0.1):
    """Grow tracks greedily along consecutive frames from precomputed features."""
    tracks = [EvalTrack(0, [i]) for i in range(len(features[0].xy))]
    active = {i: t for i, t in enumerate(tracks)}  # keypoint index in current frame -> track
    for f in range(len(frames) - 1):
        nxt = {}
        for m in soft_mnn_match(features[f].desc, features[f + 1].desc, threshold, temperature):
            tr = active.get(m.index_a)
            if tr is None:
                continue
            tr.indices.append(m.index_b)
            nxt[m.index_b] = tr
        for j in range(len(features[f + 1].xy)):
            if j not in nxt:
                tr = EvalTrack(f + 1, [j])
                tracks.append(tr)
                nxt[j] = tr
        active = nxt
    for tr in tracks:
        if tr.length < 2:
            continue
        s = tr.start_frame
        origin = features[s].xy[tr.indices[0]][None]
        for k in range(1, tr.length):
            g = s + k
            end = features[g].xy[tr.indices[k]][None]
            if not _reprojects_to(frames[s], frames[g], origin, end, eps_px)[0]:
                tr.verified = False
                break
    return tracks


def build_tracks(seq, policy, desc, top_k=512, eps_px=EPS_PX, features=None):
    frames = seq.frames
    features = features or [extract(fr, policy, desc, top_k) for fr in frames]
    return link_tracks(frames, features, eps_px)


def aktl(tracks):
    lengths = [t.length for t in tracks if t.verified]
    return math.fsum(lengths) / len(lengths) if lengths else 0.0


def repeatability_from_points(seq, points, eps_px=EPS_PX):
    """``points[f]`` are the keypoints (N_f, 2) detected in frame ``f`` (0 = reference)."""
    ref = seq.reference
    ref_xy = np.asarray(points[0], dtype=np.int64).reshape(-1, 2)
    hits = visible = 0
    for t, tgt in enumerate(seq.targets, start=1):
        if len(ref_xy) == 0:
            break
        txy, _, inb, cons = project_pixels(ref, tgt, ref_xy)
        vis = inb & cons
        visible += int(vis.sum())
        tgt_xy = np.asarray(points[t], dtype=np.float64).reshape(-1, 2)
        if vis.any() and len(tgt_xy):
            d = np.linalg.norm(txy[vis][:, None, :] - tgt_xy[None], axis=2)
            hits += int(np.count_nonzero(d.min(axis=1) <= eps_px))
    return hits / visible if visible else 0.0


def repeatability(seq, policy, top_k=512, eps_px=EPS_PX):
    pts = [keypoint_array(detect(fr.image, policy, top_k)) for fr in seq.frames]
    return repeatability_from_points(seq, pts, eps_px)


def precision_counts(frame_a, frame_b, feat_a, feat_b, eps_px=EPS_PX, threshold=0.01,
                     temperature=0.1):
    matches = soft_mnn_match(feat_a.desc, feat_b.desc, threshold, temperature)
    if not matches:
        return 0, 0
    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    ok = _reprojects_to(frame_a, frame_b, feat_a.xy[ia], feat_b.xy[ib], eps_px)
    return int(ok.sum()), len(matches)


def match_precision(frame_a, frame_b, policy, desc, eps_px=EPS_PX, top_k=512, features=None):
    """Fraction of soft-MNN matches agreeing with ground truth; None when there are no matches."""
    fa, fb = features or (extract(frame_a, policy, desc, top_k), extract(frame_b, policy, desc, top_k))
    good, total = precision_counts(frame_a, frame_b, fa, fb, eps_px)
    return good / total if total else None


@dataclass
class SequenceMetrics:
    scene_id: str
    aktl: float
    repeatability: float
    precision: float  # NaN when no matches
    num_tracks: int
    track_lengths: list


def evaluate_sequence(seq, policy, desc, top_k=512, eps_px=EPS_PX):
    frames = seq.frames
    feats = [extract(fr, policy, desc, top_k) for fr in frames]
    tracks = link_tracks(frames, feats, eps_px)
    rep = repeatability_from_points(seq, [f.xy for f in feats], eps_px)
    good = total = 0
    for f in range(len(frames) - 1):
        g, t = precision_counts(frames[f], frames[f + 1], feats[f], feats[f + 1], eps_px)
        good += g
        total += t
    prec = good / total if total else float("nan")
    valid = [t.length for t in tracks if t.verified]
    return SequenceMetrics(seq.scene_id, aktl(tracks), rep, prec, len(valid), valid)


def evaluate(sequences, policy, desc, top_k=512, eps_px=EPS_PX, workers=1):
    def run(seq):
        return evaluate_sequence(seq, policy, desc, top_k, eps_px)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(run, sequences))
    return [run(s) for s in sequences]


METRICS_HEADER = ["scene_id", "aktl", "repeatability", "precision", "num_tracks"]


def metrics_rows(metrics):
    rows = [(m.scene_id, m.aktl, m.repeatability, m.precision, m.num_tracks) for m in metrics]
    if metrics:
        lengths = [l for m in metrics for l in m.track_lengths]
        prec = [m.precision for m in metrics if not math.isnan(m.precision)]
        rows.append((
            "ALL",
            math.fsum(lengths) / len(lengths) if lengths else 0.0,
            math.fsum(m.repeatability for m in metrics) / len(metrics),
            math.fsum(prec) / len(prec) if prec else float("nan"),
            sum(m.num_tracks for m in metrics),
        ))
    return rows


def summary_aktl(metrics):
    """AKTL pooled over all valid tracks of all sequences."""
    lengths = [l for m in metrics for l in m.track_lengths]
    return math.fsum(lengths) / len(lengths) if lengths else 0.0
