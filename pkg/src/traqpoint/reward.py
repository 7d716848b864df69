"""Trackability rewards for a sampled action set.

Per keypoint and per target frame where its projection is visible, the reward
averages a saliency-rank score and a ratio-test distinctiveness score; a
keypoint's track reward is the mean over the frames where it is visible.

Both reward formulas are evaluated in exact rational arithmetic and rounded
once, so hand-computed values such as 0.875 come out exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .geometry import Projection, project_pixels, round_half_up
from .nets import descriptor_map, policy_logits, sample_descriptors


@dataclass(frozen=True)
class RewardConfig:
    K: int = 10
    tau_rank: float = 0.2
    tau_dist: float = 0.85

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not (0 < self.tau_rank < 1 and 0 < self.tau_dist < 1):
            raise ValueError("reward thresholds must lie in (0, 1)")


def _exact(x):
    return x if isinstance(x, Fraction) else Fraction(repr(float(x)))


def rank_reward(rp, tau_rank=0.2):
    """``max(0, (rp - tau) / (1 - tau))``; ``rp`` may be a Fraction."""
    rp, tau = _exact(rp), _exact(tau_rank)
    return float(max(Fraction(0), (rp - tau) / (1 - tau)))


def distinct_reward(ratio, tau_dist=0.85):
    """``max(0, (tau - ratio) / tau)``."""
    ratio, tau = _exact(ratio), _exact(tau_dist)
    return float(max(Fraction(0), (tau - ratio) / tau))


@lru_cache(maxsize=4096)
def _rank_reward_counts(count, n, tau_rank):
    return rank_reward(Fraction(count, n), tau_rank)


def _patch_bounds(center, k, size):
    lo = center - k // 2
    return max(lo, 0), min(lo + k, size)


def rank_counts(logits, xy, k=10):
    """``(strictly_smaller, patch_size)`` for the K x K patch around round(xy)."""
    h, w = logits.shape
    cx, cy = (int(v) for v in round_half_up(np.asarray(xy, dtype=np.float64)))
    y0, y1 = _patch_bounds(cy, k, h)
    x0, x1 = _patch_bounds(cx, k, w)
    patch = logits[y0:y1, x0:x1]
    return int(np.count_nonzero(patch < logits[cy, cx])), patch.size


def rank_prop(logits, xy, k=10):
    """Fraction of the K x K patch around round(xy) strictly below the centre logit."""
    c, n = rank_counts(np.asarray(logits), xy, k)
    return c / n


def rank_counts_many(logits, xy, k=10):
    """Vectorised :func:`rank_counts` for coordinates (N, 2)."""
    h, w = logits.shape
    c = round_half_up(np.asarray(xy, dtype=np.float64).reshape(-1, 2))
    lo = k // 2
    pad = np.pad(np.asarray(logits, dtype=np.float64), ((lo, k - lo), (lo, k - lo)),
                 constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(pad, (k, k))
    patches = win[c[:, 1], c[:, 0]]  # window (y, x) starts at row y - lo in the unpadded map
    centre = logits[c[:, 1], c[:, 0]][:, None, None]
    with np.errstate(invalid="ignore"):
        smaller = np.count_nonzero(patches < centre, axis=(1, 2))
    n = np.count_nonzero(~np.isnan(patches), axis=(1, 2))
    return smaller, n


@dataclass
class Track:
    keypoint: object
    projections: list
    visible_set: tuple
    per_frame_rewards: dict = field(default_factory=dict)  # t -> (rank, dist, total)
    track_reward: float = 0.0


@dataclass
class FrameResult:
    target_xy: np.ndarray
    depth: np.ndarray
    in_bounds: np.ndarray
    visible: np.ndarray
    rank: np.ndarray
    dist: np.ndarray


def frame_rewards(ref_desc, xy_ref, ref, tgt, logits_t, dmap_t, cfg):
    """Rank and distinctiveness rewards of every keypoint in one target frame."""
    n = len(xy_ref)
    txy, z, inb, cons = project_pixels(ref, tgt, xy_ref)
    vis = inb & cons
    rank = np.zeros(n)
    dist = np.zeros(n)
    idx = np.flatnonzero(vis)
    if idx.size:
        smaller, size = rank_counts_many(logits_t, txy[idx], cfg.K)
        for j, i in enumerate(idx):
            rank[i] = _rank_reward_counts(int(smaller[j]), int(size[j]), cfg.tau_rank)
        if idx.size >= 2:
            pool, _ = sample_descriptors(dmap_t, txy[idx])
            d = np.sqrt(np.sum((ref_desc[idx][:, None, :] - pool[None, :, :]) ** 2, axis=2))
            two = np.sort(d, axis=1)[:, :2]
            for j, i in enumerate(idx):
                d1, d2 = two[j]
                ratio = d1 / d2 if d2 > 0 else 1.0
                dist[i] = distinct_reward(ratio, cfg.tau_dist)
    return FrameResult(txy, z, inb, vis, rank, dist)


def compute_tracks(actions, seq, policy, desc, cfg=None, logit_maps=None, desc_maps=None,
                   workers=1, build_tracks=True):
    """Per-keypoint track rewards and their mean ``R(A)``.

    ``logit_maps`` / ``desc_maps`` may carry precomputed per-frame maps (index 0
    is the reference, which only needs a descriptor map). Returns
    ``(tracks, track_rewards, R_A, frame_results)``; ``tracks`` is None when
    ``build_tracks`` is False.
    """
    cfg = cfg or RewardConfig()
    n = len(actions)
    if n == 0:
        raise ValueError("empty action set")
    frames = seq.frames
    t_count = len(frames) - 1

    def maps_for(f):
        lm = logit_maps[f] if logit_maps is not None and logit_maps[f] is not None else None
        dm = desc_maps[f] if desc_maps is not None and desc_maps[f] is not None else None
        if f > 0 and lm is None:
            lm = policy_logits(frames[f].image, policy)
        if dm is None:
            dm = descriptor_map(frames[f].image, desc)
        return lm, dm

    def run(f):
        lm, dm = maps_for(f)
        return frame_rewards(ref_desc, actions.xy, seq.reference, frames[f], lm, dm, cfg)

    _, ref_map = maps_for(0)
    ref_desc, _ = sample_descriptors(ref_map, actions.xy)
    if workers > 1 and t_count > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, range(1, t_count + 1)))
    else:
        results = [run(f) for f in range(1, t_count + 1)]

    rewards = np.zeros(n)
    tracks = [] if build_tracks else None
    for i in range(n):
        per = {}
        for t, fr in enumerate(results):
            if fr.visible[i]:
                per[t] = (fr.rank[i], fr.dist[i], (fr.rank[i] + fr.dist[i]) / 2.0)
        r_i = math.fsum(v[2] for v in per.values()) / len(per) if per else 0.0
        rewards[i] = r_i
        if build_tracks:
            projs = [
                Projection((float(fr.target_xy[i, 0]), float(fr.target_xy[i, 1])),
                           float(fr.depth[i]), bool(fr.in_bounds[i]), bool(fr.visible[i]))
                for fr in results
            ]
            tracks.append(Track(actions[i], projs, tuple(sorted(per)), per, r_i))
    r_a = math.fsum(rewards) / n
    return tracks, rewards, r_a, results


def reward_rows(step, actions, results, rewards):
    """Rows for the per-step reward CSV."""
    rows = []
    for i in range(len(actions)):
        vis = [fr for fr in results if fr.visible[i]]
        mr = math.fsum(fr.rank[i] for fr in vis) / len(vis) if vis else 0.0
        md = math.fsum(fr.dist[i] for fr in vis) / len(vis) if vis else 0.0
        src = "global" if actions.source[i] < 0 else f"grid{int(actions.source[i])}"
        rows.append((step, i, src, len(vis), mr, md, float(rewards[i])))
    return rows


REWARD_CSV_HEADER = ["step", "keypoint_index", "source", "num_visible", "mean_rank", "mean_dist", "R_i"]
