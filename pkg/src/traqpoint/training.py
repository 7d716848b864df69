"""Policy optimisation: composite loss, warm-up supervision and the seeded training loop."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from . import io as tqio
from .fast import corner_mask
from .nets import descriptor_map, init_policy, policy_backward, policy_forward, policy_logits
from .reward import REWARD_CSV_HEADER, RewardConfig, compute_tracks, reward_rows
from .rng import stream
from .sampling import hybrid_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 2000
    seq_len: int = 5
    n_global: int = 192
    grid: int = 8
    lam: float = 0.001
    warmup_fraction: float = 0.1
    lr_max: float = 2e-4
    lr_min: float = 5e-6
    image_size: int = 128
    K: int = 10
    tau_rank: float = 0.2
    tau_dist: float = 0.85
    fast_threshold: float = 0.08
    credit: str = "shared"
    accum: int = 1
    checkpoint_every: int = 0
    seed: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.credit not in ("shared", "per_point"):
            raise ValueError(f"unknown credit mode {self.credit!r}")
        if self.seq_len < 2:
            raise ValueError("seq_len counts the reference, so it must be >= 2")

    @property
    def N(self):
        return self.n_global + self.grid ** 2

    @property
    def reward(self):
        return RewardConfig(self.K, self.tau_rank, self.tau_dist)

    @classmethod
    def from_run_config(cls, rc):
        return cls(
            total_steps=rc.steps, seq_len=rc.seq_len, n_global=rc.n_global, grid=rc.grid,
            lam=rc.lam, warmup_fraction=rc.warmup_frac, lr_max=rc.lr_max, lr_min=rc.lr_min,
            image_size=rc.image_size, K=rc.patch, tau_rank=rc.tau_rank, tau_dist=rc.tau_dist,
            fast_threshold=rc.fast_threshold, credit=rc.credit, accum=rc.accum,
            checkpoint_every=rc.checkpoint_every, seed=rc.seed,
        )


@dataclass
class StepReport:
    step: int
    loss: float
    reward: float
    entropy: float
    warmup_loss: float
    alpha: float
    lr: float
    wall_time: float


STEP_CSV_HEADER = [f.name for f in fields(StepReport)]


def anneal_alpha(step, total_steps, warmup_fraction=0.1):
    span = warmup_fraction * total_steps
    if span <= 0:
        return 0.0
    return max(0.0, 1.0 - step / span)


def _as_mask(corners, shape):
    if corners is None:
        return np.zeros(shape, dtype=bool)
    c = np.asarray(corners)
    if c.shape == tuple(shape):
        return c.astype(bool)
    mask = np.zeros(shape, dtype=bool)
    c = c.reshape(-1, 2).astype(np.int64)
    mask[c[:, 1], c[:, 0]] = True
    return mask


def warmup_loss(logits, corners):
    """Class-balanced BCE between sigmoid(logits) and the corner mask; ``(loss, grad)``."""
    target = _as_mask(corners, np.shape(logits))
    pos = int(target.sum())
    weight = (target.size - pos) / pos if pos else 1.0
    return dc.bce_with_logits(logits, target, weight)


def policy_loss(reward, actions, logits, corners=None, lam=0.001, alpha=0.0,
                credit="shared", track_rewards=None):
    """Composite policy loss and its gradient with respect to the logits.

    ``loss = -R * mean_i log P(x_i) - lam * H(P) + alpha * L_warmup``. The
    reward is a constant here. With ``credit="per_point"`` the first term is
    ``-mean_i R_i log P(x_i)`` instead. Returns ``(loss, grad, parts)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = len(actions)
    if n == 0:
        raise ValueError("empty action set")
    logp = dc.log_softmax(logits)
    prob = np.exp(logp)
    flat = actions.xy[:, 1] * logits.shape[1] + actions.xy[:, 0]
    if credit == "shared":
        weights = np.full(n, float(reward))
    elif credit == "per_point":
        weights = np.asarray(track_rewards, dtype=np.float64)
    else:
        raise ValueError(f"unknown credit mode {credit!r}")
    pg = -float(np.sum(weights * logp.ravel()[flat])) / n
    ent = dc.entropy(prob)
    if alpha > 0:
        wl, g_w = warmup_loss(logits, corners)
    else:
        wl, g_w = 0.0, np.zeros_like(logits)
    loss = pg - lam * ent + alpha * wl
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite policy loss")

    counts = np.bincount(flat, weights=weights, minlength=logits.size).reshape(logits.shape)
    g_pg = -(counts - weights.sum() * prob) / n
    g_ent = -lam * dc.entropy_grad_logits(prob)
    parts = {"policy_gradient": pg, "entropy": ent, "entropy_term": -lam * ent,
             "warmup": wl, "warmup_term": alpha * wl}
    return loss, g_pg + g_ent + alpha * g_w, parts


class FrameCache:
    """Per-frame data that never changes during policy training."""

    def __init__(self, desc, fast_threshold):
        self.desc = desc
        self.fast_threshold = fast_threshold
        self._desc = {}
        self._corners = {}

    def descriptor(self, key, frame):
        if key not in self._desc:
            self._desc[key] = descriptor_map(frame.image, self.desc)
        return self._desc[key]

    def corners(self, key, frame):
        if key not in self._corners:
            self._corners[key] = corner_mask(frame.image, self.fast_threshold)
        return self._corners[key]


def _policy_step_grads(params, seq, seq_key, cfg, step, cache, workers, alpha):
    frames = seq.frames
    logits, fcache = policy_forward(seq.reference.image, params)
    prob = dc.spatial_softmax(logits)
    actions = hybrid_sample(logits, prob, cfg.n_global, cfg.grid, stream(cfg.seed, "sample", step, seq_key))

    def target_logits(f):
        return policy_logits(frames[f].image, params)

    idx = range(1, len(frames))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            tl = list(ex.map(target_logits, idx))
    else:
        tl = [target_logits(f) for f in idx]
    desc_maps = [cache.descriptor((seq_key, f), frames[f]) for f in range(len(frames))]
    _, rewards, r_a, results = compute_tracks(
        actions, seq, None, None, cfg.reward, logit_maps=[None, *tl], desc_maps=desc_maps,
        workers=workers, build_tracks=False,
    )
    corners = cache.corners((seq_key, 0), seq.reference) if alpha > 0 else None
    loss, dlogits, parts = policy_loss(r_a, actions, logits, corners, cfg.lam, alpha,
                                       cfg.credit, rewards)
    return policy_backward(dlogits, fcache), loss, r_a, parts, (actions, results, rewards)


def train_policy(sequences, desc, cfg, params=None, workers=1, on_step=None,
                 checkpoint_dir=None, reward_csv=None):
    """Train the keypoint policy against a frozen descriptor branch.

    Returns ``(params, reports)``. Fully determined by ``cfg.seed``.
    """
    if not desc.frozen:
        raise ValueError("descriptor parameters must be frozen before policy training")
    if not sequences:
        raise ValueError("policy training needs at least one sequence")
    params = params if params is not None else init_policy(cfg.seed)
    n_targets = cfg.seq_len - 1
    seqs = [s.truncated(n_targets) for s in sequences]
    cache = FrameCache(desc, cfg.fast_threshold)
    reports = []
    reward_log = []
    for step in range(cfg.total_steps):
        t0 = time.perf_counter()
        alpha = anneal_alpha(step, cfg.total_steps, cfg.warmup_fraction)
        rng = stream(cfg.seed, "train", step)
        total = None
        stats = []
        for m in range(cfg.accum):
            k = int(rng.integers(len(seqs)))
            grads, loss, r_a, parts, detail = _policy_step_grads(
                params, seqs[k], k, cfg, step * cfg.accum + m, cache, workers, alpha)
            total = grads if total is None else {n: total[n] + grads[n] for n in total}
            stats.append((loss, r_a, parts))
            if reward_csv is not None:
                reward_log.extend(reward_rows(step, *detail))
        if cfg.accum > 1:
            total = {n: g / cfg.accum for n, g in total.items()}
        lr = dc.cosine_lr(step, cfg.total_steps, cfg.lr_max, cfg.lr_min)
        dc.adam_step(params, total, lr)
        report = StepReport(
            step=step,
            loss=float(np.mean([s[0] for s in stats])),
            reward=float(np.mean([s[1] for s in stats])),
            entropy=float(np.mean([s[2]["entropy"] for s in stats])),
            warmup_loss=float(np.mean([s[2]["warmup"] for s in stats])),
            alpha=alpha,
            lr=lr,
            wall_time=time.perf_counter() - t0,
        )
        reports.append(report)
        if on_step is not None:
            on_step(report)
        if step % 100 == 0:
            log.info("step %d loss %.4f R(A) %.4f H %.3f alpha %.2f", step, report.loss,
                     report.reward, report.entropy, alpha)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            tqio.write_checkpoint(os.path.join(checkpoint_dir, f"policy_{step + 1:06d}.tqck"),
                                  params, "policy")
    if reward_csv is not None:
        tqio.write_csv(reward_csv, REWARD_CSV_HEADER, reward_log)
    return params, reports


def report_rows(reports, include_time=True):
    rows = []
    for r in reports:
        d = asdict(r)
        if not include_time:
            d["wall_time"] = 0.0
        rows.append([d[k] for k in STEP_CSV_HEADER])
    return rows
