"""Readers and writers for every on-disk artifact.

Formats
-------
image        8-bit binary PGM (P5), maxval 255, values mapped to [0, 1].
depth        16-byte header (b"TQDP", u32 H, u32 W, u32 reserved) followed by
             H*W little-endian float32 values, row-major; 0 marks invalid depth.
intrinsics   text, ``fx fy cx cy``.
pose         text, 3x4 row-major ``[R|t]`` (world to camera), one row per line.
manifest     text, one sequence per line: ``scene_id ref_path tgt_path...``,
             paths relative to the manifest's directory.
checkpoint   b"TQCK", u32 version, u32 branch (0 policy, 1 descriptor),
             u32 layer count, then per layer the weight and the bias, each as
             u32 ndim, ndim x u32 dims, float32 data; descriptor checkpoints
             end with one frozen-flag byte.
config       flat ``key = value`` text, ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import os
import re
import struct
from dataclasses import dataclass, fields

import numpy as np

from .geometry import CameraFrame, Intrinsics, Pose


class FormatError(ValueError):
    pass


def _ensure_parent(path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


# ----------------------------------------------------------------------------
# images


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    data = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    for what in ("magic", "width", "height", "maxval"):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: malformed PGM header, expected {what} at byte {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r} at byte 0)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header, non-integer field before byte {pos}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h
    if len(raw) - pos < need:
        raise FormatError(
            f"{path}: truncated PGM payload at byte {len(raw)}, expected {need} bytes from byte {pos}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w).astype(np.float64) / 255.0


# ----------------------------------------------------------------------------
# depth, intrinsics, pose


def write_depth(path, depth):
    d = np.asarray(depth)
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(b"TQDP" + struct.pack("<III", d.shape[0], d.shape[1], 0))
        fh.write(d.astype("<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated depth header at byte {len(raw)}, expected 16 bytes")
    if raw[:4] != b"TQDP":
        raise FormatError(f"{path}: not a TQDP depth file (magic at byte 0)")
    h, w, _ = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * h * w:
        raise FormatError(f"{path}: depth payload is {len(raw) - 16} bytes at byte 16, expected {4 * h * w}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


def _fmt(v):
    return repr(float(v))


def _read_numbers(path, count):
    with open(path) as fh:
        text = fh.read()
    vals = []
    for lineno, line in enumerate(text.splitlines(), 1):
        for tok in line.split():
            try:
                vals.append(float(tok))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected a decimal number, got {tok!r}")
    if len(vals) != count:
        raise FormatError(f"{path}: expected {count} numbers, found {len(vals)}")
    return vals


def write_intrinsics(path, k):
    _ensure_parent(path)
    with open(path, "w") as fh:
        fh.write(" ".join(_fmt(v) for v in (k.fx, k.fy, k.cx, k.cy)) + "\n")


def read_intrinsics(path):
    return Intrinsics(*_read_numbers(path, 4))


def write_pose(path, pose):
    rt = np.hstack([pose.rotation, pose.translation[:, None]])
    _ensure_parent(path)
    with open(path, "w") as fh:
        for row in rt:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_pose(path):
    rt = np.array(_read_numbers(path, 12)).reshape(3, 4)
    return Pose(rt[:, :3], rt[:, 3])


def frame_paths(image_path):
    stem = os.path.splitext(os.fspath(image_path))[0]
    return image_path, stem + ".depth", stem + ".intrinsics.txt", stem + ".pose.txt"


def write_frame(image_path, frame):
    img, dep, intr, pose = frame_paths(image_path)
    write_pgm(img, frame.image)
    write_depth(dep, frame.depth)
    write_intrinsics(intr, frame.intrinsics)
    write_pose(pose, frame.pose)


def read_frame(image_path):
    img, dep, intr, pose = frame_paths(image_path)
    return CameraFrame(read_pgm(img), read_depth(dep), read_intrinsics(intr), read_pose(pose))


# ----------------------------------------------------------------------------
# manifests


def write_manifest(path, entries):
    """``entries``: iterable of (scene_id, ref_path, [target_paths])."""
    _ensure_parent(path)
    with open(path, "w") as fh:
        for sid, ref, targets in entries:
            fh.write(" ".join([sid, ref, *targets]) + "\n")


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise FormatError(
                    f"{path}:{lineno}: expected scene_id, reference path and at least one target path"
                )
            entries.append((parts[0], parts[1], parts[2:]))
    return entries


def load_sequence(manifest_path, entry):
    from .scenegen import Sequence

    root = os.path.dirname(os.fspath(manifest_path))
    sid, ref, targets = entry
    return Sequence(
        read_frame(os.path.join(root, ref)),
        [read_frame(os.path.join(root, t)) for t in targets],
        sid,
    )


def load_dataset(manifest_path):
    return [load_sequence(manifest_path, e) for e in read_manifest(manifest_path)]


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1
BRANCHES = {"policy": 0, "descriptor": 1}


def write_checkpoint(path, store, branch):
    """Write conv layers ``<name>.w`` / ``<name>.b`` of ``store`` in store order."""
    layers = [n[:-2] for n in store.names() if n.endswith(".w")]
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(b"TQCK" + struct.pack("<III", CHECKPOINT_VERSION, BRANCHES[branch], len(layers)))
        for layer in layers:
            for arr in (store[layer + ".w"], store[layer + ".b"]):
                fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.asarray(arr, dtype="<f4").tobytes())
        if branch == "descriptor":
            fh.write(bytes([1 if store.frozen else 0]))


def read_checkpoint(path, layer_names):
    """Return ``(branch, arrays, frozen)``; ``arrays`` maps parameter names to float32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"TQCK":
        raise FormatError(f"{path}: not a TQCK file")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    version, tag, count = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    branch = {v: k for k, v in BRANCHES.items()}.get(tag)
    if branch is None:
        raise FormatError(f"{path}: unknown branch tag {tag} at byte 8")
    if count != len(layer_names):
        raise FormatError(f"{path}: {count} layers at byte 12, expected {len(layer_names)}")
    pos = 16
    arrays = {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated at byte {len(raw)}, expected {n} more bytes from byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    for layer in layer_names:
        for suffix in (".w", ".b"):
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            arrays[layer + suffix] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    frozen = False
    if branch == "descriptor":
        frozen = bool(take(1)[0])
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes at byte {pos}")
    return branch, arrays, frozen


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    # data
    data: str = "data/manifest.txt"
    eval_data: str = ""
    textures: str = ""
    num_scenes: int = 8
    sequences_per_scene: int = 4
    out: str = "runs"
    seed: int = 1
    workers: int = 1
    # training
    steps: int = 2000
    seq_len: int = 5
    n_global: int = 192
    grid: int = 8
    lam: float = 0.001
    warmup_frac: float = 0.1
    lr_max: float = 2e-4
    lr_min: float = 5e-6
    image_size: int = 128
    fast_threshold: float = 0.08
    credit: str = "shared"
    accum: int = 1
    checkpoint_every: int = 0
    # reward
    patch: int = 10
    tau_rank: float = 0.2
    tau_dist: float = 0.85
    # descriptor pre-training
    desc_steps: int = 500
    desc_lr_max: float = 2e-3
    desc_lr_min: float = 5e-6
    desc_grid_stride: int = 8
    temperature: float = 0.1
    # inference / evaluation
    top_k: int = 512
    eps_px: float = 3.0
    desc: str = ""
    ckpt: str = ""

    def validate(self):
        checks = [
            ("steps", self.steps >= 0),
            ("seq_len", self.seq_len >= 2),
            ("n_global", self.n_global >= 0),
            ("grid", self.grid >= 1),
            ("lam", self.lam >= 0),
            ("warmup_frac", 0 <= self.warmup_frac <= 1),
            ("lr_max", self.lr_max > 0),
            ("lr_min", 0 <= self.lr_min <= self.lr_max),
            ("image_size", self.image_size >= 16),
            ("fast_threshold", 0 < self.fast_threshold < 1),
            ("credit", self.credit in ("shared", "per_point")),
            ("accum", self.accum >= 1),
            ("patch", self.patch >= 2),
            ("tau_rank", 0 < self.tau_rank < 1),
            ("tau_dist", 0 < self.tau_dist < 1),
            ("top_k", self.top_k >= 1),
            ("workers", self.workers >= 1),
            ("num_scenes", self.num_scenes >= 0),
            ("temperature", self.temperature > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"config value out of range: {name}={getattr(self, name)!r}")
        return self


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(name, text):
    default = CONFIG_FIELDS[name].default
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    return type(default)(text)


def parse_config(path, overrides=None):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, val = (s.strip() for s in line.partition("="))
            key = key.replace("-", "_")
            if key not in CONFIG_FIELDS:
                raise FormatError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = coerce(key, val)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad value {val!r} for {key!r}")
    values.update(overrides or {})
    return RunConfig(**values).validate()


def write_config(path, cfg):
    _ensure_parent(path)
    with open(path, "w") as fh:
        for f in fields(RunConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


# ----------------------------------------------------------------------------
# CSV reports


def write_csv(path, header, rows):
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# keypoint dumps


def write_keypoints(path, keypoints, descriptors):
    """Header ``count dim`` then ``x y score d_1 ... d_D`` per keypoint."""
    desc = np.asarray(descriptors, dtype=np.float64).reshape(len(keypoints), -1)
    _ensure_parent(path)
    with open(path, "w") as fh:
        fh.write(f"{len(keypoints)} {desc.shape[1]}\n")
        for kp, d in zip(keypoints, desc):
            fh.write(" ".join([str(kp.xy[0]), str(kp.xy[1]), repr(float(kp.score)),
                               *(repr(float(v)) for v in d)]) + "\n")


def read_keypoints(path):
    """Return ``(xy int array (N, 2), scores (N,), descriptors (N, D))``."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2:
            raise FormatError(f"{path}:1: expected 'count dim'")
        n, dim = int(head[0]), int(head[1])
        xy = np.zeros((n, 2), dtype=np.int64)
        scores = np.zeros(n)
        desc = np.zeros((n, dim))
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != 3 + dim:
                raise FormatError(f"{path}:{i + 2}: expected {3 + dim} fields, got {len(parts)}")
            xy[i] = int(parts[0]), int(parts[1])
            scores[i] = float(parts[2])
            desc[i] = [float(v) for v in parts[3:]]
    return xy, scores, desc


def write_matches(path, matches):
    write_csv(path, ["index_a", "index_b", "probability"],
              [(m.index_a, m.index_b, float(m.probability)) for m in matches])
