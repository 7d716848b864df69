"""Finite-difference checks of every hand-written backward pass.

Each check builds small random inputs from a seeded stream, compares the
analytic gradient with central differences and returns a ``CheckResult``.
ReLU kinks are handled through activation signatures (see
``diffcore.numerical_gradient``): coordinates whose perturbation flips a
ReLU mask are reported as excluded instead of being compared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nets
from .rng import stream
from .sampling import ActionSet
from .training import policy_loss

TOLERANCE = 1e-4
EPS = 1e-3
# whole networks use a smaller step so fewer coordinates straddle a ReLU kink
NET_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_error: float
    checked: int
    excluded: int

    @property
    def passed(self):
        return self.checked > 0 and self.rel_error < TOLERANCE


def _compare(name, seed, analytic, f, x, rng=None, max_entries=None, signature=None, eps=EPS):
    idx = None
    if max_entries is not None and x.size > max_entries:
        idx = np.sort(rng.choice(x.size, size=max_entries, replace=False))
    num = dc.numerical_gradient(f, x, eps, idx, signature)
    requested = x.size if idx is None else len(idx)
    checked = int(np.count_nonzero(~np.isnan(num)))
    return CheckResult(name, seed, dc.relative_error(analytic, num), checked, requested - checked)


# ----------------------------------------------------------------------------
# single ops


def check_conv2d(seed, stride=1, padding=1):
    rng = stream(seed, "gradcheck", "conv2d", stride, padding)
    x = rng.normal(size=(3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = dc.conv2d_forward(x, w, b, stride, padding)
    r = rng.normal(size=out.shape)

    def f():
        return float(np.sum(dc.conv2d_forward(x, w, b, stride, padding)[0] * r))

    _, cache = dc.conv2d_forward(x, w, b, stride, padding)
    dx, dw, db = dc.conv2d_backward(r, cache)
    tag = f"conv2d[s={stride},p={padding}]"
    return [
        _compare(tag + ".x", seed, dx, f, x),
        _compare(tag + ".w", seed, dw, f, w),
        _compare(tag + ".b", seed, db, f, b),
    ]


def check_relu(seed):
    rng = stream(seed, "gradcheck", "relu")
    x = rng.normal(size=(2, 6, 6))
    r = rng.normal(size=x.shape)
    _, mask = dc.relu_forward(x)

    def f():
        return float(np.sum(dc.relu_forward(x)[0] * r))

    return [_compare("relu", seed, dc.relu_backward(r, mask), f, x,
                     signature=lambda: x > 0)]


def check_sigmoid(seed):
    rng = stream(seed, "gradcheck", "sigmoid")
    x = rng.normal(scale=3.0, size=(5, 5))
    r = rng.normal(size=x.shape)
    s, cache = dc.sigmoid_forward(x)

    def f():
        return float(np.sum(dc.sigmoid_forward(x)[0] * r))

    return [_compare("sigmoid", seed, dc.sigmoid_backward(r, cache), f, x)]


def check_bilinear(seed):
    rng = stream(seed, "gradcheck", "bilinear")
    x = rng.normal(size=(3, 8, 12))
    out, cache = dc.bilinear_downsample_forward(x, 2)
    r = rng.normal(size=out.shape)

    def f():
        return float(np.sum(dc.bilinear_downsample_forward(x, 2)[0] * r))

    return [_compare("bilinear_downsample", seed, dc.bilinear_downsample_backward(r, cache), f, x)]


def check_l2_normalize(seed):
    rng = stream(seed, "gradcheck", "l2")
    x = rng.normal(size=(6, 4, 4))
    out, cache = dc.l2_normalize_forward(x)
    r = rng.normal(size=out.shape)

    def f():
        return float(np.sum(dc.l2_normalize_forward(x)[0] * r))

    return [_compare("l2_normalize", seed, dc.l2_normalize_backward(r, cache), f, x)]


def check_softmax_entropy(seed):
    rng = stream(seed, "gradcheck", "softmax")
    z = rng.normal(size=(8, 8))
    r = rng.normal(size=z.shape)
    p = dc.spatial_softmax(z)

    def f_sm():
        return float(np.sum(dc.spatial_softmax(z) * r))

    def f_ent():
        return dc.entropy(dc.spatial_softmax(z))

    return [
        _compare("spatial_softmax", seed, dc.spatial_softmax_backward(r, p), f_sm, z),
        _compare("entropy", seed, dc.entropy_grad_logits(p), f_ent, z),
    ]


def check_bce(seed):
    rng = stream(seed, "gradcheck", "bce")
    z = rng.normal(scale=2.0, size=(8, 8))
    y = rng.random(z.shape) < 0.2
    wpos = float(rng.uniform(1.0, 6.0))
    _, grad = dc.bce_with_logits(z, y, wpos)
    return [_compare("bce_with_logits", seed, grad, lambda: dc.bce_with_logits(z, y, wpos)[0], z)]


def check_sample_descriptors(seed):
    rng = stream(seed, "gradcheck", "sample")
    dmap = rng.normal(size=(5, 4, 4))
    xy = np.column_stack([rng.integers(0, 16, 7), rng.integers(0, 16, 7)])
    out, cache = nets.sample_descriptors(dmap, xy)
    r = rng.normal(size=out.shape)

    def f():
        return float(np.sum(nets.sample_descriptors(dmap, xy)[0] * r))

    return [_compare("sample_descriptors", seed, nets.sample_descriptors_backward(r, cache), f, dmap)]


def check_matching_loss(seed):
    rng = stream(seed, "gradcheck", "dual")
    sim = rng.uniform(-1, 1, size=(6, 7))
    idx = np.array([0, 2, 3, 5])

    def f():
        return nets.focal_desc_loss(nets.dual_softmax(sim, 0.1)[0], idx)[0]

    prob, cache = nets.dual_softmax(sim, 0.1)
    _, dprob = nets.focal_desc_loss(prob, idx)
    return [_compare("dual_softmax+focal", seed, nets.dual_softmax_backward(dprob, cache), f, sim)]


# ----------------------------------------------------------------------------
# whole networks


def _policy_signature(image, params):
    def sig():
        _, caches = nets.policy_forward(image, params)
        return np.concatenate([c.ravel() for c in caches[1::2]])
    return sig


def check_policy_loss(seed, credit="shared", alpha=0.5, size=16, per_param=24):
    """Full policy loss (policy gradient, entropy and warm-up terms) w.r.t. every parameter."""
    rng = stream(seed, "gradcheck", "policy", credit)
    params = nets.init_policy(seed, dtype=np.float64)
    for name in params.names():
        if name.endswith(".b"):
            params.params[name][...] = rng.normal(scale=0.1, size=params[name].shape)
    image = rng.random((size, size))
    n = 12
    xy = np.column_stack([rng.integers(0, size, n), rng.integers(0, size, n)])
    actions = ActionSet(xy, np.zeros(n), np.full(n, -1))
    corners = rng.random((size, size)) < 0.1
    reward = float(rng.uniform(0.1, 1.0))
    track = rng.uniform(0, 1, n)

    def f():
        logits = nets.policy_logits(image, params)
        return policy_loss(reward, actions, logits, corners, 0.001, alpha, credit, track)[0]

    logits, caches = nets.policy_forward(image, params)
    _, dlogits, _ = policy_loss(reward, actions, logits, corners, 0.001, alpha, credit, track)
    grads = nets.policy_backward(dlogits, caches)
    sig = _policy_signature(image, params)
    return [
        _compare(f"policy_loss[{credit}].{name}", seed, grads[name], f, params.params[name], rng,
                 per_param, sig, NET_EPS)
        for name in params.names()
    ]


def check_descriptor_pair(seed, size=16, per_param=24):
    """Descriptor network through sampling, dual softmax and focal loss."""
    rng = stream(seed, "gradcheck", "descriptor")
    params = nets.init_descriptor(seed, dtype=np.float64)
    img_a, img_b = rng.random((size, size)), rng.random((size, size))
    m = 6
    pa = np.column_stack([rng.integers(0, size, m), rng.integers(0, size, m)])
    pb = np.column_stack([rng.integers(0, size, m), rng.integers(0, size, m)])

    def loss_and_grad(need_grad):
        map_a, ca = nets.descriptor_forward(img_a, params)
        map_b, cb = nets.descriptor_forward(img_b, params)
        da, sa = nets.sample_descriptors(map_a, pa)
        db, sb = nets.sample_descriptors(map_b, pb)
        prob, dcache = nets.dual_softmax(da @ db.T, 0.1)
        loss, dprob = nets.focal_desc_loss(prob)
        if not need_grad:
            return loss, None
        dsim = nets.dual_softmax_backward(dprob, dcache)
        ga = nets.descriptor_backward(nets.sample_descriptors_backward(dsim @ db, sa), ca)
        gb = nets.descriptor_backward(nets.sample_descriptors_backward(dsim.T @ da, sb), cb)
        return loss, {k: ga[k] + gb[k] for k in ga}

    def sig():
        masks = []
        for img in (img_a, img_b):
            _, cache = nets.descriptor_forward(img, params)
            masks += [cache[name + ".relu"].ravel() for name, *_ in nets.DESCRIPTOR_LAYERS[:-1]]
        return np.concatenate(masks)

    _, grads = loss_and_grad(True)
    return [
        _compare(f"descriptor_pair.{name}", seed, grads[name], lambda: loss_and_grad(False)[0],
                 params.params[name], rng, per_param, sig, NET_EPS)
        for name in params.names()
    ]


CHECKS = [
    ("conv2d", lambda s: check_conv2d(s, 1, 1) + check_conv2d(s, 2, 1) + check_conv2d(s, 1, 0)),
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("bilinear_downsample", check_bilinear),
    ("l2_normalize", check_l2_normalize),
    ("softmax_entropy", check_softmax_entropy),
    ("bce_with_logits", check_bce),
    ("sample_descriptors", check_sample_descriptors),
    ("dual_softmax_focal", check_matching_loss),
    ("policy_loss", lambda s: check_policy_loss(s, "shared") + check_policy_loss(s, "per_point")),
    ("descriptor_pair", check_descriptor_pair),
]


def run_suite(seeds, on_result=None):
    """Run every check for every seed; returns the list of ``CheckResult``."""
    results = []
    for seed in seeds:
        for _, check in CHECKS:
            for res in check(seed):
                results.append(res)
                if on_result is not None:
                    on_result(res)
    return results
