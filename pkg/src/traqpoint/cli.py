"""``traqpoint`` command-line entry point.

Every subcommand reads an optional ``--config`` file; flags given on the
command line override it. Progress goes to stderr, results to files under
``--out``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import io as tqio
from .io import RunConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("traqpoint")
DEFAULTS = RunConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# (flag, config key, type, help)
_FLAGS = {
    "seed": ("--seed", int, "random seed"),
    "workers": ("--workers", int, "worker threads (results do not depend on it)"),
    "out": ("--out", str, "output directory"),
    "steps": ("--steps", int, "optimisation steps"),
    "seq_len": ("--seq-len", int, "frames per training sequence, reference included"),
    "n_global": ("--n-global", int, "global samples per step"),
    "grid": ("--grid", int, "grid side G; G*G cell samples per step"),
    "lam": ("--lambda", float, "entropy weight"),
    "warmup_frac": ("--warmup-frac", float, "fraction of steps with corner warm-up"),
    "top_k": ("--top-k", int, "keypoints kept per image"),
    "image_size": ("--image-size", int, "rendered image side in pixels"),
    "desc": ("--desc", str, "descriptor checkpoint (optional for detect)"),
    "ckpt": ("--ckpt", str, "policy checkpoint"),
    "credit": ("--credit", str, "policy-gradient credit: shared or per_point"),
    "data": ("--data", str, "dataset manifest"),
    "eval_data": ("--eval-data", str, "held-out manifest (defaults to --data)"),
    "textures": ("--textures", str, "directory of .pgm textures (generated when empty)"),
    "num_scenes": ("--num-scenes", int, "scenes to render"),
    "sequences_per_scene": ("--sequences-per-scene", int, "sequences rendered per scene"),
    "desc_steps": ("--desc-steps", int, "descriptor pre-training steps"),
    "eps_px": ("--eps-px", float, "reprojection tolerance in pixels"),
    "checkpoint_every": ("--checkpoint-every", int, "write a policy checkpoint every N steps (0: off)"),
    "accum": ("--accum", int, "sequences accumulated per update"),
}

_COMMON = ["seed", "workers", "out"]
_COMMANDS = {
    "gen-data": (["textures", "num_scenes", "sequences_per_scene", "image_size", "seq_len"],
                 "render a synthetic sequence dataset"),
    "pretrain-desc": (["data", "desc_steps"], "pre-train and freeze the descriptor branch"),
    "train-policy": (["data", "desc", "steps", "seq_len", "n_global", "grid", "lam",
                      "warmup_frac", "credit", "image_size", "checkpoint_every", "accum"],
                     "train the keypoint policy against a frozen descriptor"),
    "detect": (["ckpt", "desc", "top_k"], "detect keypoints in one image"),
    "match": (["ckpt", "desc", "top_k"], "detect and match keypoints between two images"),
    "track": (["data", "ckpt", "desc", "top_k", "eps_px"], "build verified tracks over sequences"),
    "eval": (["data", "eval_data", "ckpt", "desc", "top_k", "eps_px"],
             "AKTL, repeatability and match precision on a dataset"),
    "gradcheck": ([], "finite-difference check of every backward pass"),
}


def build_parser():
    parser = _Parser(prog="traqpoint", description="Track-aware keypoint learning toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (keys, text) in _COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="key = value config file; flags override it",
                       default=argparse.SUPPRESS)
        if name in ("detect", "match"):
            p.add_argument("--image", required=True, help="input .pgm image")
        if name == "match":
            p.add_argument("--image-b", required=True, help="second .pgm image")
        if name == "gradcheck":
            p.add_argument("--num-seeds", type=int, default=20, help="seeds checked, starting at --seed")
        for key in _COMMON + keys:
            flag, typ, text_ = _FLAGS[key]
            kwargs = {"dest": key, "type": typ, "default": argparse.SUPPRESS,
                      "help": f"{text_} (default: {getattr(DEFAULTS, key)!r})"}
            if key == "credit":
                kwargs["choices"] = ["shared", "per_point"]
            p.add_argument(flag, **kwargs)
    return parser


def resolve_config(ns):
    overrides = {k: v for k, v in vars(ns).items() if k in tqio.CONFIG_FIELDS}
    path = getattr(ns, "config", None)
    if path:
        return tqio.parse_config(path, overrides)
    return RunConfig(**overrides).validate()


# ----------------------------------------------------------------------------
# subcommands


def _require(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_gen_data(cfg, ns):
    from .scenegen import generate_dataset, write_textures

    tex_dir = cfg.textures
    if not tex_dir:
        tex_dir = os.path.join(cfg.out, "textures")
        write_textures(tex_dir, max(cfg.num_scenes, 1), seed=cfg.seed)
        log.info("wrote procedural textures to %s", tex_dir)
    config = {"image_size": cfg.image_size, "seq_len": cfg.seq_len,
              "sequences_per_scene": cfg.sequences_per_scene}
    manifest = generate_dataset(cfg.num_scenes, tex_dir, config, cfg.seed, cfg.out)
    log.info("manifest: %s", manifest)


def cmd_pretrain_desc(cfg, ns):
    from .nets import pretrain_descriptor, save_checkpoint
    from .plotting import plot_loss

    seqs = tqio.load_dataset(_require(cfg.data, "--data"))
    params, losses = pretrain_descriptor(
        seqs, steps=cfg.desc_steps, seed=cfg.seed, lr_max=cfg.desc_lr_max, lr_min=cfg.desc_lr_min,
        temperature=cfg.temperature, stride=cfg.desc_grid_stride,
    )
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "descriptor.tqck")
    save_checkpoint(path, params, "descriptor")
    tqio.write_csv(os.path.join(cfg.out, "pretrain_loss.csv"), ["step", "loss"], enumerate(losses))
    plot_loss(losses, os.path.join(cfg.out, "pretrain_loss.png"))
    log.info("descriptor checkpoint: %s", path)


def cmd_train_policy(cfg, ns):
    from .nets import load_checkpoint, save_checkpoint
    from .plotting import plot_training
    from .training import STEP_CSV_HEADER, TrainConfig, report_rows, train_policy

    desc = load_checkpoint(_require(cfg.desc, "--desc"), "descriptor")
    seqs = tqio.load_dataset(_require(cfg.data, "--data"))
    tcfg = TrainConfig.from_run_config(cfg)
    os.makedirs(cfg.out, exist_ok=True)

    def progress(rep):
        if rep.step % 50 == 0 or rep.step == tcfg.total_steps - 1:
            print(f"step {rep.step:5d}  loss {rep.loss:+.4f}  R(A) {rep.reward:.4f}  "
                  f"H {rep.entropy:.3f}  alpha {rep.alpha:.2f}", file=sys.stderr)

    params, reports = train_policy(
        seqs, desc, tcfg, workers=cfg.workers, on_step=progress, checkpoint_dir=cfg.out,
        reward_csv=os.path.join(cfg.out, "rewards.csv"),
    )
    path = os.path.join(cfg.out, "policy.tqck")
    save_checkpoint(path, params, "policy")
    # wall time is the only nondeterministic column; keep it out of the main log
    tqio.write_csv(os.path.join(cfg.out, "train_log.csv"), STEP_CSV_HEADER,
                   report_rows(reports, include_time=False))
    tqio.write_csv(os.path.join(cfg.out, "timing.csv"), ["step", "wall_time"],
                   [(r.step, r.wall_time) for r in reports])
    if reports:
        plot_training(reports, os.path.join(cfg.out, "training.png"))
    log.info("policy checkpoint: %s", path)


def _load_models(cfg, need_desc=True):
    from .nets import load_checkpoint

    policy = load_checkpoint(_require(cfg.ckpt, "--ckpt"), "policy")
    if not need_desc and not cfg.desc:
        return policy, None
    desc = load_checkpoint(_require(cfg.desc, "--desc"), "descriptor")
    return policy, desc


def _image_features(path, policy, desc, top_k):
    from .inference import detect, keypoint_array
    from .nets import descriptor_map, sample_descriptors

    image = tqio.read_pgm(_require(path, "image"))
    kps = detect(image, policy, top_k)
    xy = keypoint_array(kps)
    if desc is None:
        d = np.zeros((len(xy), 0))
    elif len(xy):
        d = sample_descriptors(descriptor_map(image, desc), xy)[0]
    else:
        d = np.zeros((0, 64))
    return image, kps, xy, d


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_detect(cfg, ns):
    from .plotting import plot_keypoints

    policy, desc = _load_models(cfg, need_desc=False)
    image, kps, xy, d = _image_features(ns.image, policy, desc, cfg.top_k)
    out = os.path.join(cfg.out, _stem(ns.image) + ".kp.txt")
    tqio.write_keypoints(out, kps, d)
    plot_keypoints(image, xy, os.path.join(cfg.out, _stem(ns.image) + ".kp.png"),
                   [k.score for k in kps])
    log.info("%d keypoints -> %s", len(kps), out)


def cmd_match(cfg, ns):
    from .inference import soft_mnn_match
    from .plotting import plot_matches

    policy, desc = _load_models(cfg)
    img_a, kps_a, xy_a, d_a = _image_features(ns.image, policy, desc, cfg.top_k)
    img_b, kps_b, xy_b, d_b = _image_features(ns.image_b, policy, desc, cfg.top_k)
    matches = soft_mnn_match(d_a, d_b, temperature=cfg.temperature)
    stem = f"{_stem(ns.image)}__{_stem(ns.image_b)}"
    tqio.write_keypoints(os.path.join(cfg.out, _stem(ns.image) + ".kp.txt"), kps_a, d_a)
    tqio.write_keypoints(os.path.join(cfg.out, _stem(ns.image_b) + ".kp.txt"), kps_b, d_b)
    tqio.write_matches(os.path.join(cfg.out, stem + ".matches.csv"), matches)
    plot_matches(img_a, img_b, xy_a, xy_b, matches, os.path.join(cfg.out, stem + ".matches.png"))
    log.info("%d matches", len(matches))


def _features_for(seq, policy, desc, top_k, workers):
    from concurrent.futures import ThreadPoolExecutor

    from .evaluation import extract

    frames = seq.frames
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda fr: extract(fr, policy, desc, top_k), frames))
    return [extract(fr, policy, desc, top_k) for fr in frames]


def cmd_track(cfg, ns):
    from .evaluation import link_tracks

    policy, desc = _load_models(cfg)
    seqs = tqio.load_dataset(_require(cfg.data, "--data"))
    rows = []
    for seq in seqs:
        feats = _features_for(seq, policy, desc, cfg.top_k, cfg.workers)
        for t_id, tr in enumerate(link_tracks(seq.frames, feats, cfg.eps_px)):
            for k, idx in enumerate(tr.indices):
                x, y = feats[tr.start_frame + k].xy[idx]
                rows.append((seq.scene_id, t_id, tr.start_frame + k, int(x), int(y), int(tr.verified)))
        log.info("tracked %s", seq.scene_id)
    tqio.write_csv(os.path.join(cfg.out, "tracks.csv"),
                   ["scene_id", "track", "frame", "x", "y", "verified"], rows)


def cmd_eval(cfg, ns):
    from .evaluation import METRICS_HEADER, evaluate, metrics_rows
    from .plotting import plot_metrics

    policy, desc = _load_models(cfg)
    seqs = tqio.load_dataset(_require(cfg.eval_data or cfg.data, "--eval-data"))
    metrics = evaluate(seqs, policy, desc, cfg.top_k, cfg.eps_px, cfg.workers)
    rows = metrics_rows(metrics)
    tqio.write_csv(os.path.join(cfg.out, "metrics.csv"), METRICS_HEADER, rows)
    plot_metrics(metrics, os.path.join(cfg.out, "metrics.png"))
    summary = rows[-1]
    print(f"AKTL {summary[1]:.4f}  repeatability {summary[2]:.4f}  precision {summary[3]:.4f}",
          file=sys.stderr)


def cmd_gradcheck(cfg, ns):
    from .gradcheck import TOLERANCE, run_suite

    failures = []

    def report(res):
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4s} seed {res.seed:3d}  {res.name:40s} rel {res.rel_error:.2e}  "
              f"checked {res.checked} excluded {res.excluded}", file=sys.stderr)
        if not res.passed:
            failures.append(res)

    results = run_suite(range(cfg.seed, cfg.seed + ns.num_seeds), report)
    os.makedirs(cfg.out, exist_ok=True)
    tqio.write_csv(os.path.join(cfg.out, "gradcheck.csv"),
                   ["name", "seed", "rel_error", "checked", "excluded", "passed"],
                   [(r.name, r.seed, r.rel_error, r.checked, r.excluded, int(r.passed)) for r in results])
    if failures:
        raise FloatingPointError(f"{len(failures)} gradient checks exceed {TOLERANCE:g}")
    print(f"all {len(results)} gradient checks below {TOLERANCE:g}", file=sys.stderr)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-desc": cmd_pretrain_desc,
    "train-policy": cmd_train_policy,
    "detect": cmd_detect,
    "match": cmd_match,
    "track": cmd_track,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        try:
            cfg = resolve_config(ns)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad configuration: {exc}") from exc
        if cfg.out:
            os.makedirs(cfg.out, exist_ok=True)
        t0 = time.perf_counter()
        HANDLERS[ns.command](cfg, ns)
        log.info("%s finished in %.1f s", ns.command, time.perf_counter() - t0)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
