"""Keypoint extraction (sigmoid, NMS, top-k) and soft mutual-nearest-neighbour matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import sigmoid
from .nets import dual_softmax, policy_logits


@dataclass(frozen=True)
class Keypoint:
    xy: tuple
    score: float


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    probability: float


def nms_mask(scores, window=5, candidates=None):
    """Pixels whose score beats every other score in their ``window`` x ``window``
    neighbourhood. An equal neighbour suppresses the pixel only when it comes
    earlier in row-major order, so exactly the first of a tied group survives."""
    s = np.asarray(scores, dtype=np.float64)
    if candidates is not None:
        s = np.where(candidates, s, -np.inf)
    r = window // 2
    h, w = s.shape
    pad = np.pad(s, r, constant_values=-np.inf)
    keep = s > -np.inf
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[r + dy:r + dy + h, r + dx:r + dx + w]
            if dy > 0 or (dy == 0 and dx > 0):
                keep &= s >= nb
            else:
                keep &= s > nb
    return keep


def select_top_k(scores, mask, top_k):
    """Masked pixels sorted by score (descending, row-major among equals), at most ``top_k``."""
    ys, xs = np.nonzero(mask)  # row-major order
    vals = scores[ys, xs]
    order = np.argsort(-vals, kind="stable")[:top_k]
    return [Keypoint((int(xs[i]), int(ys[i])), float(vals[i])) for i in order]


def detect_from_logits(logits, top_k=512, nms_window=5):
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = sigmoid(logits)
    return select_top_k(scores, nms_mask(scores, nms_window), top_k)


def detect(image, policy, top_k=512, nms_window=5):
    return detect_from_logits(policy_logits(image, policy), top_k, nms_window)


def keypoint_array(keypoints):
    return np.array([kp.xy for kp in keypoints], dtype=np.int64).reshape(-1, 2)


def soft_mnn_match(desc_a, desc_b, threshold=0.01, temperature=0.1):
    """Mutual arg-max pairs of the dual-softmax matrix with probability >= ``threshold``."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    prob, _ = dual_softmax(a.reshape(len(a), -1) @ b.reshape(len(b), -1).T, temperature)
    best_b = prob.argmax(axis=1)
    best_a = prob.argmax(axis=0)
    matches = []
    for i, j in enumerate(best_b):
        p = prob[i, j]
        if best_a[j] == i and p >= threshold:
            matches.append(Match(i, int(j), float(p)))
    return matches
