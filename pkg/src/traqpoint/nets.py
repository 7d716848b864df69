"""Keypoint policy network, frozen descriptor network and descriptor matching losses."""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from . import diffcore as dc
from . import io as tqio
from .geometry import grid_pixels, project_pixels
from .rng import stream

log = logging.getLogger(__name__)

# (name, out_channels, in_channels, kernel, stride)
POLICY_LAYERS = [
    ("conv1", 8, 1, 3, 1),
    ("conv2", 16, 8, 3, 1),
    ("conv3", 32, 16, 3, 1),
    ("head", 1, 32, 1, 1),
]

DESC_DIM = 64
DESCRIPTOR_LAYERS = [
    ("conv1", 16, 1, 3, 1),
    ("conv2", 32, 16, 3, 2),
    ("conv3", 64, 32, 3, 2),
    ("conv4", 64, 64, 3, 1),
    ("head", DESC_DIM, 64 + 32, 1, 1),
]

MIN_SIZE = 16


def init_params(layers, seed, dtype=np.float32, frozen=False):
    """Kaiming-uniform weights, zero biases."""
    rng = stream(seed, "init")
    store = dc.ParamStore(dtype=dtype, frozen=frozen)
    for name, co, ci, k, _ in layers:
        bound = math.sqrt(6.0 / (ci * k * k))
        store.add(name + ".w", rng.uniform(-bound, bound, size=(co, ci, k, k)))
        store.add(name + ".b", np.zeros(co))
    return store


def init_policy(seed, dtype=np.float32):
    return init_params(POLICY_LAYERS, (seed, "policy"), dtype)


def init_descriptor(seed, dtype=np.float32):
    return init_params(DESCRIPTOR_LAYERS, (seed, "descriptor"), dtype)


def _check_image(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < MIN_SIZE:
        raise ValueError(f"image too small: {img.shape}, need at least {MIN_SIZE}x{MIN_SIZE}")
    return img


# ----------------------------------------------------------------------------
# policy branch


def policy_forward(image, params):
    """Logit map (H, W) for ``image``; the second value is the backward cache."""
    x = _check_image(image)[None]
    caches = []
    for i, (name, _, _, k, stride) in enumerate(POLICY_LAYERS):
        x, c = dc.conv2d_forward(x, params[name + ".w"], params[name + ".b"], stride, k // 2)
        caches.append(c)
        if i < len(POLICY_LAYERS) - 1:
            x, mask = dc.relu_forward(x)
            caches.append(mask)
    return x[0], caches


def policy_backward(dlogits, caches):
    grads = {}
    d = np.asarray(dlogits, dtype=np.float64)[None]
    for i in reversed(range(len(POLICY_LAYERS))):
        name = POLICY_LAYERS[i][0]
        if i < len(POLICY_LAYERS) - 1:
            d = dc.relu_backward(d, caches[2 * i + 1])
        d, grads[name + ".w"], grads[name + ".b"] = dc.conv2d_backward(d, caches[2 * i])
    return grads


def policy_logits(image, params):
    return policy_forward(image, params)[0]


# ----------------------------------------------------------------------------
# descriptor branch


def descriptor_forward(image, params):
    """Unit-normalised descriptor map laid out (D, H/4, W/4), plus cache."""
    img = _check_image(image)
    if img.shape[0] % 4 or img.shape[1] % 4:
        raise ValueError(f"descriptor input must have sides divisible by 4, got {img.shape}")
    x = img[None]
    cache = {}
    feats = {}
    for name, _, _, k, stride in DESCRIPTOR_LAYERS[:-1]:
        x, cache[name] = dc.conv2d_forward(x, params[name + ".w"], params[name + ".b"], stride, k // 2)
        x, cache[name + ".relu"] = dc.relu_forward(x)
        feats[name] = x
    skip, cache["skip"] = dc.bilinear_downsample_forward(feats["conv2"], 2)
    cat = np.concatenate([x, skip], axis=0)
    y, cache["head"] = dc.conv2d_forward(cat, params["head.w"], params["head.b"], 1, 0)
    out, cache["norm"] = dc.l2_normalize_forward(y)
    return out, cache


def descriptor_backward(dmap, cache):
    grads = {}
    d = dc.l2_normalize_backward(dmap, cache["norm"])
    dcat, grads["head.w"], grads["head.b"] = dc.conv2d_backward(d, cache["head"])
    c_top = DESCRIPTOR_LAYERS[-2][1]
    d = dcat[:c_top]
    dskip = dc.bilinear_downsample_backward(dcat[c_top:], cache["skip"])
    for name, *_ in reversed(DESCRIPTOR_LAYERS[:-1]):
        d = dc.relu_backward(d, cache[name + ".relu"])
        d, grads[name + ".w"], grads[name + ".b"] = dc.conv2d_backward(d, cache[name])
        if name == "conv3":
            # conv2's activation feeds both conv3 and the skip path
            d = d + dskip
    return grads


def descriptor_map(image, params):
    return descriptor_forward(image, params)[0]


def sample_descriptors(dmap, xy):
    """Bilinear samples of ``dmap`` at full-resolution coordinates ``xy`` (N, 2),
    renormalised to unit length. Returns ``(desc (N, D), cache)``."""
    d, h, w = dmap.shape
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    full_w, full_h = 4 * w, 4 * h
    if xy.size and (xy.min() < 0 or xy[:, 0].max() > full_w - 1 or xy[:, 1].max() > full_h - 1):
        raise ValueError("descriptor sample coordinate out of bounds")
    u = np.clip(xy[:, 0] / 4.0, 0, w - 1)
    v = np.clip(xy[:, 1] / 4.0, 0, h - 1)
    x0 = np.minimum(np.floor(u).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = u - x0
    fy = v - y0
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    idx = np.stack([(y0, x0), (y0, x1), (y1, x0), (y1, x1)], axis=0)  # (4, 2, N)
    raw = np.zeros((len(xy), d))
    for c in range(4):
        raw += wts[:, c:c + 1] * dmap[:, idx[c, 0], idx[c, 1]].T
    norm = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    out = raw / norm
    return out, (dmap.shape, wts, idx, out, norm)


def sample_descriptors_backward(dout, cache):
    shape, wts, idx, out, norm = cache
    draw = (dout - out * np.sum(dout * out, axis=1, keepdims=True)) / norm
    dmap = np.zeros(shape)
    for c in range(4):
        contrib = (wts[:, c:c + 1] * draw).T  # (D, N)
        np.add.at(dmap, (slice(None), idx[c, 0], idx[c, 1]), contrib)
    return dmap


def sample_descriptor(dmap, xy):
    return sample_descriptors(dmap, [xy])[0][0]


# ----------------------------------------------------------------------------
# matching probabilities and loss


def _softmax(z, axis):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dual_softmax(sim, temperature=0.1):
    """Row softmax times column softmax of ``sim / temperature``; returns ``(P, cache)``."""
    z = np.asarray(sim, dtype=np.float64) / temperature
    if z.size == 0:
        return z.copy(), (z, z, temperature)
    a = _softmax(z, 1)
    b = _softmax(z, 0)
    return a * b, (a, b, temperature)


def dual_softmax_backward(dprob, cache):
    a, b, temperature = cache
    ga = dprob * b
    gb = dprob * a
    dz = a * (ga - np.sum(ga * a, axis=1, keepdims=True))
    dz += b * (gb - np.sum(gb * b, axis=0, keepdims=True))
    return dz / temperature


def focal_desc_loss(prob, indices=None, alpha=0.25, gamma=2.0):
    """Focal loss over positive entries ``prob[i, i]`` for ``i`` in ``indices``.

    Returns ``(loss, dloss/dprob)``.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if indices is None:
        indices = np.arange(min(prob.shape))
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("no correspondences")
    p = prob[indices, indices]
    m = len(indices)
    logp = np.log(p)
    loss = float(-np.sum(alpha * (1 - p) ** gamma * logp) / m)
    dp = -(alpha / m) * (-gamma * (1 - p) ** (gamma - 1) * logp + (1 - p) ** gamma / p)
    grad = np.zeros_like(prob)
    np.add.at(grad, (indices, indices), dp)
    return loss, grad


# ----------------------------------------------------------------------------
# descriptor pre-training


def correspondences(frame_a, frame_b, stride=8):
    """Grid pixels of ``frame_a`` visible in ``frame_b`` and their projections."""
    h, w = frame_a.depth.shape
    px = grid_pixels((h, w), stride) + stride // 2
    px = px[(px[:, 0] < w) & (px[:, 1] < h)]
    px = px[frame_a.depth[px[:, 1], px[:, 0]] > 0]
    if len(px) == 0:
        return px, np.zeros((0, 2))
    xy, _, inb, cons = project_pixels(frame_a, frame_b, px)
    vis = inb & cons
    return px[vis], xy[vis]


def pair_loss(params, frame_a, frame_b, temperature=0.1, stride=8, need_grad=True):
    """Focal loss of one pair and, optionally, its parameter gradients."""
    pa, pb = correspondences(frame_a, frame_b, stride)
    if len(pa) == 0:
        raise ValueError("no correspondences")
    map_a, cache_a = descriptor_forward(frame_a.image, params)
    map_b, cache_b = descriptor_forward(frame_b.image, params)
    da, sa = sample_descriptors(map_a, pa)
    db, sb = sample_descriptors(map_b, pb)
    prob, dcache = dual_softmax(da @ db.T, temperature)
    loss, dprob = focal_desc_loss(prob)
    if not need_grad:
        return loss, None
    dsim = dual_softmax_backward(dprob, dcache)
    ga = descriptor_backward(sample_descriptors_backward(dsim @ db, sa), cache_a)
    gb = descriptor_backward(sample_descriptors_backward(dsim.T @ da, sb), cache_b)
    return loss, {k: ga[k] + gb[k] for k in ga}


def pretrain_descriptor(sequences, steps=500, seed=1, lr_max=2e-3, lr_min=5e-6,
                        temperature=0.1, stride=8, min_matches=16, params=None, on_step=None):
    """Train the descriptor branch on frame pairs, then freeze it.

    Returns ``(params, losses)`` where ``losses`` holds one value per step.
    """
    if not sequences:
        raise ValueError("pre-training needs at least one sequence")
    params = params if params is not None else init_descriptor(seed)
    losses = []
    for step in range(steps):
        rng = stream(seed, "pretrain", step)
        for _ in range(100):
            seq = sequences[int(rng.integers(len(sequences)))]
            frames = seq.frames
            i, j = rng.choice(len(frames), size=2, replace=False)
            pa, _ = correspondences(frames[i], frames[j], stride)
            if len(pa) >= min_matches:
                break
        else:
            raise RuntimeError("could not find a frame pair with enough correspondences")
        t0 = time.perf_counter()
        loss, grads = pair_loss(params, frames[i], frames[j], temperature, stride)
        lr = dc.cosine_lr(step, steps, lr_max, lr_min)
        dc.adam_step(params, grads, lr)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss, lr, time.perf_counter() - t0)
        if step % 50 == 0:
            log.info("pretrain step %d loss %.4f lr %.2e", step, loss, lr)
    return params.freeze(), losses


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, branch):
    tqio.write_checkpoint(path, params, branch)


def load_checkpoint(path, branch=None):
    layers = None
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head[:4] != b"TQCK":
        raise tqio.FormatError(f"{path}: not a TQCK file")
    tag = int.from_bytes(head[8:12], "little") if len(head) >= 12 else -1
    found = {0: "policy", 1: "descriptor"}.get(tag)
    if branch is not None and found != branch:
        raise tqio.FormatError(f"{path}: expected a {branch} checkpoint, found {found}")
    layers = POLICY_LAYERS if found == "policy" else DESCRIPTOR_LAYERS
    _, arrays, frozen = tqio.read_checkpoint(path, [l[0] for l in layers])
    store = dc.ParamStore(dtype=np.float32, frozen=False)
    for name, *_ in layers:
        for suffix in (".w", ".b"):
            store.add(name + suffix, arrays[name + suffix])
    store.frozen = frozen
    return store
