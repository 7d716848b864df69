"""FAST-9 segment-test corner detector."""

from __future__ import annotations

import numpy as np

from .inference import nms_mask

# Bresenham circle of radius 3 as (dx, dy), clockwise from the top
CIRCLE = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
]
ARC = 9


def segment_scores(image, threshold=0.08):
    """Corner score per pixel (0 where the segment test fails).

    A pixel passes when ARC contiguous circle pixels are all brighter than
    ``centre + threshold`` or all darker than ``centre - threshold``; the score
    is the best such arc's smallest absolute contrast. Pixels closer than 3 to
    the border score 0.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    out = np.zeros((h, w))
    if h < 7 or w < 7:
        return out
    c = img[3:h - 3, 3:w - 3]
    ring = np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in CIRCLE])
    contrast = np.abs(ring - c)
    best = np.zeros(c.shape)
    for mask in (ring > c + threshold, ring < c - threshold):
        for s in range(16):
            idx = [(s + k) % 16 for k in range(ARC)]
            ok = mask[idx].all(axis=0)
            m = contrast[idx].min(axis=0)
            best = np.where(ok & (m > best), m, best)
    out[3:h - 3, 3:w - 3] = best
    return out


def fast_detect(image, threshold=0.08, nms=True):
    """Corners as ``(xy (N, 2) int, scores (N,))`` in row-major order after 3x3 NMS."""
    scores = segment_scores(image, threshold)
    mask = scores > 0
    if nms:
        mask = nms_mask(scores, 3, candidates=mask)
    ys, xs = np.nonzero(mask)
    return np.stack([xs, ys], axis=1).astype(np.int64), scores[ys, xs]


def corner_mask(image, threshold=0.08):
    xy, _ = fast_detect(image, threshold)
    mask = np.zeros(np.asarray(image).shape, dtype=bool)
    mask[xy[:, 1], xy[:, 0]] = True
    return mask
