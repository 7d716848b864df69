"""Pinhole projection between frames, visibility checks and view overlap.

Pixel coordinates are (x, y) = (column, row) with pixel centers on integers.
Poses map world to camera: ``X_cam = R @ X_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_TOL = 0.05


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


@dataclass(eq=False)
class CameraFrame:
    image: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics
    pose: Pose

    def __post_init__(self):
        if self.image.shape != self.depth.shape:
            raise ValueError(
                f"image {self.image.shape} and depth {self.depth.shape} differ in size"
            )

    @property
    def shape(self):
        return self.image.shape


@dataclass(frozen=True)
class Projection:
    target_xy: tuple
    projected_depth: float
    in_bounds: bool
    depth_consistent: bool


NO_PROJECTION = Projection((float("nan"), float("nan")), float("nan"), False, False)


def round_half_up(v):
    """Nearest integer with halves rounded up; used for every pixel lookup."""
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def _apply(m, pts):
    """``pts @ m.T`` with a fixed elementwise summation order, so a point's result
    does not depend on how many points are transformed together."""
    return np.stack([m[r, 0] * pts[:, 0] + m[r, 1] * pts[:, 1] + m[r, 2] * pts[:, 2]
                     for r in range(3)], axis=1)


def backproject(frame, xy, depth):
    """World points for pixel coordinates ``xy`` (N, 2) at camera depths ``depth`` (N,)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    k = frame.intrinsics
    cam = np.stack(
        [(xy[:, 0] - k.cx) / k.fx * depth, (xy[:, 1] - k.cy) / k.fy * depth, depth], axis=1
    )
    return _apply(frame.pose.rotation.T, cam - frame.pose.translation)


def project_world(frame, points):
    """Pixel coordinates (N, 2) and camera depths (N,) of world points (N, 3)."""
    cam = _apply(frame.pose.rotation, np.asarray(points, dtype=np.float64).reshape(-1, 3))
    cam = cam + frame.pose.translation
    k = frame.intrinsics
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    return xy, z


def project_pixels(ref, tgt, pixels, depth_tol=DEPTH_TOL):
    """Vectorised form of :func:`project_point` for integer pixels (N, 2).

    Returns ``(target_xy, projected_depth, in_bounds, depth_consistent)``;
    pixels without valid reference depth get NaN coordinates and False flags.
    """
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    h, w = ref.depth.shape
    if px.size and (px[:, 0].min() < 0 or px[:, 1].min() < 0 or px[:, 0].max() >= w or px[:, 1].max() >= h):
        raise ValueError("pixel outside reference image")
    d = ref.depth[px[:, 1], px[:, 0]].astype(np.float64)
    has_depth = d > 0
    xy, z = project_world(tgt, backproject(ref, px, d))
    th, tw = tgt.depth.shape
    with np.errstate(invalid="ignore"):
        in_bounds = (
            has_depth
            & (z > 0)
            & (xy[:, 0] >= 0) & (xy[:, 0] <= tw - 1)
            & (xy[:, 1] >= 0) & (xy[:, 1] <= th - 1)
        )
    consistent = np.zeros_like(in_bounds)
    if in_bounds.any():
        r = round_half_up(xy[in_bounds])
        dt = tgt.depth[r[:, 1], r[:, 0]].astype(np.float64)
        zi = z[in_bounds]
        consistent[in_bounds] = (dt > 0) & (np.abs(zi - dt) / zi <= depth_tol)
    xy[~has_depth] = np.nan
    z = np.where(has_depth, z, np.nan)
    return xy, z, in_bounds, consistent


def project_point(ref, tgt, pixel, depth_tol=DEPTH_TOL):
    x, y = int(pixel[0]), int(pixel[1])
    h, w = ref.depth.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"pixel {(x, y)} outside reference image {w}x{h}")
    if not ref.depth[y, x] > 0:
        return NO_PROJECTION
    xy, z, inb, cons = project_pixels(ref, tgt, [(x, y)], depth_tol)
    return Projection((float(xy[0, 0]), float(xy[0, 1])), float(z[0]), bool(inb[0]), bool(cons[0]))


def is_visible(p):
    return bool(p.in_bounds and p.depth_consistent)


def grid_pixels(shape, stride=1):
    h, w = shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def overlap_ratio(a, b, stride=4, depth_tol=DEPTH_TOL):
    """Fraction of ``a``'s valid-depth pixels (stride grid) visible in ``b``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    px = grid_pixels(a.depth.shape, stride)
    px = px[a.depth[px[:, 1], px[:, 0]] > 0]
    if len(px) == 0:
        raise ValueError("empty depth")
    _, _, inb, cons = project_pixels(a, b, px, depth_tol)
    return float(np.count_nonzero(inb & cons) / len(px))
