"""Figures written next to the CSV reports."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _smooth(values, window):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window or window < 2:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def _save(fig, path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training(reports, path, window=50):
    """Reward, loss, entropy and warm-up weight against step."""
    steps = np.array([r.step for r in reports])
    series = [
        ("R(A)", [r.reward for r in reports]),
        ("loss", [r.loss for r in reports]),
        ("entropy", [r.entropy for r in reports]),
        ("warm-up weight", [r.alpha for r in reports]),
    ]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(8, 5), sharex=True)
        for ax, (name, vals) in zip(axes.ravel(), series):
            ax.plot(steps, vals, lw=0.6, alpha=0.4, color="C0")
            sm = _smooth(vals, window)
            if len(sm) != len(vals):
                ax.plot(steps[window - 1:], sm, lw=1.4, color="C1")
            ax.set_ylabel(name)
        for ax in axes[1]:
            ax.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(losses, path, window=25, label="focal loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(losses, lw=0.6, alpha=0.4)
        sm = _smooth(losses, window)
        if len(sm) != len(losses):
            ax.plot(np.arange(window - 1, len(losses)), sm, lw=1.4)
        ax.set_xlabel("step")
        ax.set_ylabel(label)
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(metrics, path):
    """Per-sequence AKTL and the pooled distribution of valid track lengths."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
        ids = [m.scene_id for m in metrics]
        a1.bar(range(len(ids)), [m.aktl for m in metrics], color="C0")
        a1.set_xticks(range(len(ids)))
        a1.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
        a1.set_ylabel("AKTL")
        lengths = [l for m in metrics for l in m.track_lengths]
        if lengths:
            bins = np.arange(0.5, max(lengths) + 1.5)
            a2.hist(lengths, bins=bins, color="C1")
        a2.set_xlabel("valid track length (frames)")
        a2.set_ylabel("tracks")
        fig.tight_layout()
        return _save(fig, path)


def plot_keypoints(image, xy, path, scores=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(image, cmap="gray", vmin=0, vmax=1)
        xy = np.asarray(xy).reshape(-1, 2)
        ax.scatter(xy[:, 0], xy[:, 1], s=6, c=scores if scores is not None else "orange",
                   cmap="viridis")
        ax.set_axis_off()
        ax.grid(False)
        return _save(fig, path)


def plot_matches(image_a, image_b, xy_a, xy_b, matches, path, correct=None):
    """Side-by-side images with match lines (green correct, red wrong when known)."""
    with plt.rc_context(STYLE):
        w = image_a.shape[1]
        canvas = np.hstack([image_a, image_b])
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.imshow(canvas, cmap="gray", vmin=0, vmax=1)
        for k, m in enumerate(matches):
            pa, pb = xy_a[m.index_a], xy_b[m.index_b]
            color = "C2" if correct is None or correct[k] else "C3"
            ax.plot([pa[0], pb[0] + w], [pa[1], pb[1]], lw=0.5, color=color)
        ax.set_axis_off()
        ax.grid(False)
        return _save(fig, path)
