"""Synthetic planar scenes with exact depth, and sequence/dataset assembly."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io as tqio
from .geometry import CameraFrame, Intrinsics, Pose, overlap_ratio
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(eq=False)
class PlanarScene:
    """A textured plane ``normal . X = distance`` with the texture centered at
    the plane point closest to the world origin."""

    texture: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    distance: float = 4.0
    texture_scale: float = 0.03

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit length")
        if not self.distance > 0:
            raise ValueError("plane distance must be positive")

    @property
    def axes(self):
        """In-plane unit axes (u, v) with u x v = normal."""
        n = self.normal
        ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = ref - (ref @ n) * n
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)

    @property
    def origin(self):
        return self.normal * self.distance

    def texture_coords(self, points):
        """Continuous (col, row) texel coordinates of world points on the plane."""
        u, v = self.axes
        rel = np.asarray(points, dtype=np.float64) - self.origin
        th, tw = self.texture.shape
        return (
            rel @ u / self.texture_scale + (tw - 1) / 2.0,
            rel @ v / self.texture_scale + (th - 1) / 2.0,
        )


@dataclass(eq=False)
class Sequence:
    reference: CameraFrame
    targets: list
    scene_id: str = ""

    def __post_init__(self):
        if len(self.targets) < 1:
            raise ValueError("a sequence needs at least one target frame")

    @property
    def frames(self):
        return [self.reference, *self.targets]

    def truncated(self, n_targets):
        return Sequence(self.reference, self.targets[:n_targets], self.scene_id)


def _bilinear(tex, tx, ty):
    th, tw = tex.shape
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    fx = tx - x0
    fy = ty - y0
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render_view(scene, intrinsics, pose, size):
    """Render ``scene`` (one PlanarScene or a list; nearest surface wins).

    Pixels whose ray misses every textured extent get image 0 and depth 0.
    """
    planes = [scene] if isinstance(scene, PlanarScene) else list(scene)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    k = intrinsics
    rays_cam = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones_like(xs)], axis=-1)
    rays = rays_cam @ pose.rotation  # world directions, camera z-component 1
    center = pose.center
    image = np.zeros((h, w))
    depth = np.zeros((h, w))
    for plane in planes:
        denom = rays @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (plane.distance - plane.normal @ center) / denom
        hit = np.isfinite(lam) & (lam > 0)
        pts = center + lam[..., None] * rays
        tx, ty = plane.texture_coords(pts)
        th, tw = plane.texture.shape
        with np.errstate(invalid="ignore"):
            hit &= (tx >= 0) & (tx <= tw - 1) & (ty >= 0) & (ty <= th - 1)
        hit &= (depth == 0) | (lam < depth)
        if hit.any():
            depth[hit] = lam[hit]
            image[hit] = _bilinear(plane.texture, tx[hit], ty[hit])
    if not np.any(depth > 0):
        raise ValueError("plane not visible")
    return CameraFrame(image=image, depth=depth, intrinsics=intrinsics, pose=pose)


# ----------------------------------------------------------------------------
# poses


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    kx = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    r = np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx
    # re-orthonormalize so the Pose invariant holds to 1e-9 after composition
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def looking_at_plane(scene, center):
    """Pose at ``center`` whose optical axis is the plane normal."""
    u, v = scene.axes
    r = np.stack([u, v, scene.normal])
    return Pose(r, -r @ np.asarray(center, dtype=np.float64))


def default_intrinsics(size):
    h, w = size
    f = float(max(h, w))
    return Intrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0)


def _perturb(pose, rng, max_angle_deg, max_shift, max_depth_shift):
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(-max_angle_deg, max_angle_deg))
    r = rotation_from_axis_angle(axis, angle) @ pose.rotation
    # shift expressed in the camera frame, mostly sideways
    shift_cam = np.array(
        [rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift),
         rng.uniform(-max_depth_shift, max_depth_shift)]
    )
    center = pose.center + pose.rotation.T @ shift_cam
    return Pose(r, -r @ center)


def _photometric(frame, rng, noise_max=0.02):
    gain = rng.uniform(0.8, 1.2)
    bias = rng.uniform(-0.1, 0.1)
    sigma = rng.uniform(0.0, noise_max)
    valid = frame.depth > 0
    img = frame.image.copy()
    img[valid] = gain * img[valid] + bias + sigma * rng.normal(size=int(valid.sum()))
    return CameraFrame(np.clip(img, 0.0, 1.0), frame.depth, frame.intrinsics, frame.pose)


def build_sequence(scene, T=5, ov_min=0.1, ov_max=0.7, rng_seed=0, size=(128, 128),
                   intrinsics=None, photometric=False, chain=False, max_attempts=500,
                   max_angle_deg=25.0, scene_id="", overlap_stride=4):
    """Reference view plus ``T`` targets satisfying the overlap rule.

    With ``chain=False`` every target overlaps the reference by a ratio in
    ``[ov_min, ov_max]``; with ``chain=True`` each target is a random step from
    the previous frame and the ratio is measured against that frame, which
    gives trajectory-like sequences for tracking evaluation.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < ov_min < ov_max <= 1:
        raise ValueError("need 0 < ov_min < ov_max <= 1")
    rng = stream(rng_seed, "sequence")
    intrinsics = intrinsics or default_intrinsics(size)
    base = looking_at_plane(scene, np.zeros(3))
    height = scene.distance
    ref_pose = _perturb(base, rng, 5.0, 0.3 * height, 0.1 * height)
    ref = render_view(scene, intrinsics, ref_pose, size)
    footprint = height * size[1] / intrinsics.fx
    targets = []
    prev = ref
    attempts = 0
    while len(targets) < T:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"sequence construction failed: {len(targets)}/{T} targets after {attempts} attempts"
            )
        attempts += 1
        anchor = prev if chain else ref
        scale = 0.35 if chain else 0.8
        pose = _perturb(anchor.pose, rng, max_angle_deg * (0.4 if chain else 1.0),
                        scale * footprint, 0.15 * height)
        try:
            cand = render_view(scene, intrinsics, pose, size)
            ov = overlap_ratio(anchor, cand, stride=overlap_stride)
        except ValueError:
            continue
        if ov_min <= ov <= ov_max:
            targets.append(cand)
            prev = cand
    if photometric:
        prng = stream(rng_seed, "photometric")
        targets = [_photometric(t, prng) for t in targets]
    return Sequence(ref, targets, scene_id)


# ----------------------------------------------------------------------------
# textures and datasets


def procedural_texture(seed, size=512):
    """Corner-rich grayscale texture: shapes over smoothed multi-scale noise."""
    rng = stream(seed, "texture")
    h = w = size
    tex = np.zeros((h, w))
    for sigma, amp in ((32, 0.35), (8, 0.15)):
        tex += amp * gaussian_filter(rng.normal(size=(h, w)), sigma) * sigma
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12) * 0.5 + 0.25
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(int(size * size / 900)):
        kind = rng.integers(3)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        a, b = rng.uniform(4, 28, size=2)
        val = rng.uniform(0, 1)
        if kind == 0:
            mask = (np.abs(xs - cx) < a) & (np.abs(ys - cy) < b)
        elif kind == 1:
            mask = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 < 1
        else:
            th = rng.uniform(0, math.pi)
            c, s = math.cos(th), math.sin(th)
            px, py = (xs - cx) * c + (ys - cy) * s, -(xs - cx) * s + (ys - cy) * c
            mask = (np.abs(px) + np.abs(py) * a / b < a)
        tex[mask] = val
    return np.clip(gaussian_filter(tex, 0.7), 0.0, 1.0)


def write_textures(directory, count, seed=0, size=512):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i in range(count):
        p = os.path.join(directory, f"texture_{i:03d}.pgm")
        tqio.write_pgm(p, procedural_texture((seed, i), size))
        paths.append(p)
    return paths


def load_textures(directory):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    if not names:
        raise FileNotFoundError(f"no .pgm textures in {directory}")
    textures = []
    for n in names:
        path = os.path.join(directory, n)
        try:
            textures.append(tqio.read_pgm(path))
        except (OSError, ValueError) as exc:
            raise ValueError(f"unreadable texture {path}: {exc}") from exc
    return textures


def random_scene(texture, rng, texture_scale=0.03, max_tilt_deg=10.0):
    tilt = rotation_from_axis_angle(rng.normal(size=3), math.radians(rng.uniform(0, max_tilt_deg)))
    normal = tilt @ np.array([0.0, 0.0, 1.0])
    return PlanarScene(texture, normal / np.linalg.norm(normal), rng.uniform(3.5, 4.5), texture_scale)


DATASET_DEFAULTS = {
    "image_size": 128,
    "seq_len": 5,
    "sequences_per_scene": 4,
    "ov_min": 0.1,
    "ov_max": 0.7,
    "chain": False,
    "photometric": True,
}


def quantize_frame(frame):
    """The frame exactly as it reads back from disk (8-bit image, float32 depth)."""
    img = np.clip(np.floor(frame.image * 255.0 + 0.5), 0, 255) / 255.0
    return CameraFrame(img, frame.depth.astype(np.float32).astype(np.float64),
                       frame.intrinsics, frame.pose)


def generate_sequences(num_scenes, textures, config=None, rng_seed=0):
    """Yield ``(sequence_id, Sequence)`` pairs for a dataset, deterministically."""
    cfg = dict(DATASET_DEFAULTS, **(config or {}))
    size = (int(cfg["image_size"]),) * 2
    for k in range(num_scenes):
        srng = stream(rng_seed, "scene", k)
        tex = textures[int(srng.integers(len(textures)))]
        scene = random_scene(tex, srng)
        for j in range(int(cfg["sequences_per_scene"])):
            sid = f"scene{k:03d}_{j:02d}"
            seq = build_sequence(
                scene, T=int(cfg["seq_len"]) - 1, ov_min=float(cfg["ov_min"]),
                ov_max=float(cfg["ov_max"]), rng_seed=(rng_seed, k, j), size=size,
                photometric=bool(cfg["photometric"]), chain=bool(cfg["chain"]), scene_id=sid,
            )
            yield sid, seq


def generate_dataset(num_scenes, textures_dir, config=None, rng_seed=0, out_dir="data"):
    """Render sequences to ``out_dir`` and write ``manifest.txt``; returns its path."""
    textures = load_textures(textures_dir) if num_scenes > 0 else []
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for sid, seq in generate_sequences(num_scenes, textures, config, rng_seed):
        paths = []
        for f, frame in enumerate(seq.frames):
            rel = os.path.join(sid, f"frame_{f}.pgm")
            tqio.write_frame(os.path.join(out_dir, rel), quantize_frame(frame))
            paths.append(rel)
        entries.append((sid, paths[0], paths[1:]))
        log.info("wrote %s (%d frames)", sid, len(paths))
    manifest = os.path.join(out_dir, "manifest.txt")
    tqio.write_manifest(manifest, entries)
    return manifest
