"""Hand-written forward/backward numpy ops used by the two networks.

Every op works on single images laid out as (C, H, W). Forwards return the
output and a cache; backwards take the upstream gradient and that cache.
Arithmetic is float64 throughout; parameters may be stored as float32 and
are upcast on entry.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteGradient(FloatingPointError):
    pass


# ----------------------------------------------------------------------------
# convolution


def conv2d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlate ``x`` (Ci, H, W) with ``w`` (Co, Ci, k, k) plus ``b``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weights {w.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (Ci, kh, kw, Ho, Wo) so the row order matches w.reshape(Co, -1)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(ci * kh * kw, ho * wo)
    out = (w.reshape(co, -1) @ cols).reshape(co, ho, wo) + b[:, None, None]
    cache = (x.shape, xp.shape, w, cols, stride, padding)
    return out, cache


def conv2d_backward(dout, cache):
    """Return (dx, dw, db) for the upstream gradient ``dout`` (Co, Ho, Wo)."""
    x_shape, xp_shape, w, cols, stride, padding = cache
    co, ci, kh, kw = w.shape
    dout = np.asarray(dout, dtype=np.float64)
    ho, wo = dout.shape[1:]
    d2 = dout.reshape(co, ho * wo)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = (w.reshape(co, -1).T @ d2).reshape(ci, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding]
    return dxp, dw, db


# ----------------------------------------------------------------------------
# pointwise


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dout, s):
    return dout * s * (1.0 - s)


# ----------------------------------------------------------------------------
# resampling and normalization


def _bilinear_matrix(n_in, factor):
    """Rows interpolate a length-``n_in`` signal at half-pixel aligned output centers."""
    n_out = n_in // factor
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * factor - 0.5
        lo = int(math.floor(src))
        t = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - t
        m[i, hi_c] += t
    return m


def bilinear_downsample_forward(x, factor):
    """Downsample (C, H, W) by an integer ``factor`` with bilinear weights."""
    x = np.asarray(x, dtype=np.float64)
    ah = _bilinear_matrix(x.shape[1], factor)
    aw = _bilinear_matrix(x.shape[2], factor)
    out = np.einsum("ih,chw,jw->cij", ah, x, aw, optimize=True)
    return out, (ah, aw)


def bilinear_downsample_backward(dout, cache):
    ah, aw = cache
    return np.einsum("ih,cij,jw->chw", ah, dout, aw, optimize=True)


def l2_normalize_forward(x, eps=1e-12):
    """Unit-normalize along the channel axis (axis 0)."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt(np.sum(x * x, axis=0, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dout, cache):
    y, norm = cache
    return (dout - y * np.sum(dout * y, axis=0, keepdims=True)) / norm


# ----------------------------------------------------------------------------
# distributions over the image plane


def spatial_softmax(logits):
    """Softmax over every entry of ``logits`` (any shape)."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def spatial_softmax_backward(dprob, prob):
    return prob * (dprob - np.sum(dprob * prob))


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    s = z - z.max()
    return s - math.log(np.exp(s).sum())


def entropy(prob):
    """Shannon entropy in nats with 0 log 0 taken as 0."""
    p = np.asarray(prob, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def entropy_grad_logits(prob):
    """Gradient of ``entropy(spatial_softmax(L))`` with respect to ``L``."""
    p = np.asarray(prob, dtype=np.float64)
    logp = np.zeros_like(p)
    nz = p > 0
    logp[nz] = np.log(p[nz])
    return -p * (logp + entropy(p))


def _softplus(x):
    return np.logaddexp(0.0, x)


def bce_with_logits(logits, targets, pos_weight=1.0):
    """Pixel-averaged weighted binary cross-entropy of sigmoid(logits) vs targets.

    Returns ``(loss, dloss/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n = z.size
    # -log(sigmoid(z)) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    per = pos_weight * y * _softplus(-z) + (1.0 - y) * _softplus(z)
    loss = float(per.sum() / n)
    s = sigmoid(z)
    grad = (-pos_weight * y * (1.0 - s) + (1.0 - y) * s) / n
    return loss, grad


# ----------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Named parameters with Adam moments and a shared step counter."""

    def __init__(self, params=None, dtype=np.float32, frozen=False):
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.m = OrderedDict()
        self.v = OrderedDict()
        self.step = 0
        self.frozen = frozen
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        self.m[name] = np.zeros(arr.shape)
        self.v[name] = np.zeros(arr.shape)

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def copy(self, dtype=None):
        out = ParamStore(dtype=dtype or self.dtype, frozen=self.frozen)
        for name, value in self.params.items():
            out.add(name, value)
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out

    def freeze(self):
        self.frozen = True
        return self


def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place. Returns ``store``."""
    if store.frozen:
        raise RuntimeError("parameter store is frozen")
    for name in store.params:
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != store.params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {store.params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        store.params[name] = (p.astype(np.float64) - update).astype(store.dtype)
    return store


def cosine_lr(step, total_steps, lr_max=2e-4, lr_min=5e-6):
    if total_steps <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ----------------------------------------------------------------------------
# finite differences


def numerical_gradient(f, x, eps=1e-3, indices=None, signature=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``indices`` limits the check to a subset of flat positions. When
    ``signature`` is given it must return the activation pattern (e.g. ReLU
    masks) of the current evaluation; positions where the pattern at +eps or
    -eps differs from the unperturbed one straddle a kink, where a central
    difference is not a valid derivative estimate. Unchecked and kink-crossing
    entries of the result are NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    base = signature() if signature is not None else None
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        same = signature is None or np.array_equal(signature(), base)
        flat[i] = old - eps
        fm = f()
        same = same and (signature is None or np.array_equal(signature(), base))
        flat[i] = old
        if same:
            grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric):
    """Norm-wise relative error, ignoring NaN (unchecked) entries of ``numeric``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
