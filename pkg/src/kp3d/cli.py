"""Command-line entry point: ``kp3d {vo,eval-traj,eval-kp,synth,gradcheck}``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 estimation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck
from .errors import ConfigError, EstimationFailedError, FormatError, Kp3dError
from .evaluation import Trajectory, homography_accuracy, kitti_drift, localization_error, matching_score, \
    repeatability, umeyama_sim3
from .geometry import CameraIntrinsics
from .io import RunConfig, build_config, load_config, read_features, read_matrix, read_pfm, read_poses, \
    write_features, write_pfm, write_poses, atomic_write
from .losses import bilinear_sample
from .matching import KeypointFrame
from .pose import track_frames
from .synth import SceneConfig, generate_planar_scene, generate_point_scene

log = logging.getLogger("kp3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3
REORTHONORMALIZE_EVERY = 1000
CONFIG_NAME = "config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class Report:
    """Ordered key/value output rendered as ``key=value`` lines or JSON."""

    def __init__(self):
        self.summary: dict = {}
        self.rows: list[dict] = []

    def render(self, fmt: str) -> str:
        if fmt == "json":
            def clean(v):
                return None if isinstance(v, float) and not math.isfinite(v) else v
            doc = {k: clean(v) for k, v in self.summary.items()}
            if self.rows:
                doc["rows"] = [{k: clean(v) for k, v in r.items()} for r in self.rows]
            return json.dumps(doc, indent=2) + "\n"
        lines = [" ".join(f"{k}={_fmt(v)}" for k, v in r.items()) for r in self.rows]
        lines += [f"{k}={_fmt(v)}" for k, v in self.summary.items()]
        return "".join(line + "\n" for line in lines)


# -- configuration resolution ---------------------------------------------------------

def _resolve_config(args, default_path: Optional[Path] = None) -> RunConfig:
    path = args.config or (default_path if default_path is not None and default_path.exists() else None)
    cfg = load_config(path) if path else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.intrinsics:
        try:
            K = CameraIntrinsics.from_string(args.intrinsics)
        except (ValueError, Kp3dError) as exc:
            raise UsageError(f"--intrinsics: {exc}") from None
        overrides.update({k: repr(getattr(K, k)) for k in ("fx", "fy", "cx", "cy")})
    if args.ransac_iters is not None:
        overrides["ransac.max_iterations"] = str(args.ransac_iters)
    if args.ransac_thresh is not None:
        overrides["ransac.inlier_threshold_px"] = repr(args.ransac_thresh)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return build_config(overrides, cfg)


# -- vo ----------------------------------------------------------------------------------

def _frame_paths(seq: Path) -> list[Path]:
    feat = seq / "features"
    if not feat.is_dir():
        raise FormatError(f"{feat} is not a directory")
    return sorted(feat.glob("*.dakf"))


def _attach_depths(frame: KeypointFrame, depth_path: Path) -> KeypointFrame:
    """Fill unknown keypoint depths from a dense depth map."""
    if not depth_path.exists():
        return frame
    grid = read_pfm(depth_path)
    s = bilinear_sample(grid, frame.positions)
    d = np.where(s.valid & (s.values[:, 0] > 0), s.values[:, 0], np.nan)
    if frame.depths is not None:
        d = np.where(np.isnan(frame.depths), d, frame.depths)
    return KeypointFrame(frame.positions, frame.descriptors, frame.scores, d, frame.image_size)


def cmd_vo(args) -> tuple[Report, int]:
    seq = Path(args.sequence)
    cfg = _resolve_config(args, seq / CONFIG_NAME)
    if cfg.intrinsics is None:
        raise ConfigError("camera intrinsics required (config keys fx, fy, cx, cy or --intrinsics)")
    paths = _frame_paths(seq)
    if len(paths) < 2:
        raise FormatError(f"{seq}: need at least two feature files, found {len(paths)}")

    def load(p):
        return _attach_depths(read_features(p), seq / "depth" / (p.stem + ".pfm"))

    poses, diags = track_frames((load(p) for p in paths), cfg.intrinsics, cfg.ransac,
                                cfg.max_match_distance, REORTHONORMALIZE_EVERY)
    report = Report()
    for d in diags:
        report.rows.append({"frame": d.frame, "matches": d.matches, "inliers": d.inliers,
                            "rms_px": d.rms_px, "status": "fallback" if d.fallback else "ok"})
    failures = sum(d.fallback for d in diags)
    out = Path(args.output) if args.output else seq / "poses_est.txt"
    write_poses(out, poses)
    report.summary.update(frames=len(poses), fallbacks=failures, output=str(out))
    return report, EXIT_OK


# -- eval-traj --------------------------------------------------------------------------

def cmd_eval_traj(args) -> tuple[Report, int]:
    est = Trajectory(read_poses(args.estimate))
    gt = Trajectory(read_poses(args.groundtruth))
    if len(est) != len(gt):
        raise FormatError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    lengths = tuple(args.lengths) if args.lengths else None
    kw = {"step": args.step} | ({"lengths": lengths} if lengths else {})
    sim = umeyama_sim3(est, gt)
    aligned = kitti_drift(est.aligned(sim), gt, **kw)
    raw = kitti_drift(est, gt, **kw)
    report = Report()
    report.summary.update(
        t_rel=aligned.t_rel, r_rel=aligned.r_rel, n_segments=aligned.n_segments,
        t_rel_unaligned=raw.t_rel, r_rel_unaligned=raw.r_rel, sim3_scale=float(sim.scale),
    )
    return report, EXIT_OK


# -- eval-kp ------------------------------------------------------------------------------

def cmd_eval_kp(args) -> tuple[Report, int]:
    cfg = _resolve_config(args)
    a = read_features(args.features_a)
    b = read_features(args.features_b)
    H = read_matrix(args.homography)
    thr = cfg.metric.distance_threshold_px
    hom = homography_accuracy(a, b, H, cfg=cfg.metric)
    report = Report()
    report.summary.update(
        repeatability=repeatability(a.positions, b.positions, H, thr, b.image_size),
        localization_error=localization_error(a.positions, b.positions, H, thr, b.image_size),
        matching_score=matching_score(a, b, H, thr),
        corner_error=hom.corner_error,
    )
    for eps, ok in hom.accurate.items():
        report.summary[f"homography_accuracy_eps{eps:g}"] = int(ok)
    return report, EXIT_OK


# -- synth ---------------------------------------------------------------------------------

def cmd_synth(args) -> tuple[Report, int]:
    cfg = _resolve_config(args)
    s = cfg.synth
    K = cfg.intrinsics or CameraIntrinsics(500.0, 500.0, s.width / 2, s.height / 2)
    try:
        scene = SceneConfig(
            n_points=s.n_points, depth_range=(s.depth_min, s.depth_max), image_size=(s.width, s.height),
            intrinsics=K, pixel_noise_sigma=s.pixel_noise_sigma, outlier_rate=s.outlier_rate,
            descriptor_dim=s.descriptor_dim, descriptor_noise_sigma=s.descriptor_noise_sigma,
            depth_noise_sigma=s.depth_noise_sigma, seed=cfg.seed,
        )
        if s.planar:
            seq = generate_planar_scene(scene, s.n_frames, texture_seed=cfg.seed, motion=s.motion, step=s.step)
        else:
            seq = generate_point_scene(scene, s.n_frames, s.motion, s.step)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.output)
    for k, frame in enumerate(seq.frames):
        name = f"{k:06d}"
        write_features(out / "features" / f"{name}.dakf", frame.keypoints)
        if frame.depth is not None:
            write_pfm(out / "depth" / f"{name}.pfm", np.nan_to_num(frame.depth, nan=0.0))
        if frame.image is not None:
            write_pfm(out / "images" / f"{name}.pfm", frame.image)
    write_poses(out / "poses_gt.txt", seq.trajectory_gt.poses)
    atomic_write(out / CONFIG_NAME, dataclasses.replace(cfg, intrinsics=K).to_text().encode("ascii"))
    report = Report()
    report.summary.update(frames=len(seq.frames), keypoints=sum(len(f.keypoints) for f in seq.frames),
                          output=str(out))
    return report, EXIT_OK


# -- gradcheck ------------------------------------------------------------------------------

def cmd_gradcheck(args) -> tuple[Report, int]:
    seed = 0 if args.seed is None else args.seed
    names = args.only or list(gradcheck.CHECKS)
    unknown = sorted(set(names) - set(gradcheck.CHECKS))
    if unknown:
        raise UsageError(f"unknown check(s): {', '.join(unknown)}")
    report = Report()
    worst_all = 0.0
    for name in names:
        errs = [gradcheck.CHECKS[name](seed + k).rel_error for k in range(args.instances)]
        worst = max(errs)
        worst_all = max(worst_all, worst)
        report.rows.append({"check": name, "instances": args.instances, "max_rel_error": worst,
                            "result": "PASS" if worst < gradcheck.TOLERANCE else "FAIL"})
    failed = sum(r["result"] == "FAIL" for r in report.rows)
    report.summary.update(tolerance=gradcheck.TOLERANCE, max_rel_error=worst_all, failed=failed)
    return report, EXIT_ESTIMATION if failed else EXIT_OK


# -- parser -------------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *, config=True):
    p.add_argument("--format", choices=("text", "json"), default="text", help="report format")
    p.add_argument("--seed", type=int, help="overrides config key 'seed'")
    if config:
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--intrinsics", metavar="FX,FY,CX,CY")
        p.add_argument("--ransac-iters", type=int, help="overrides ransac.max_iterations")
        p.add_argument("--ransac-thresh", type=float, help="overrides ransac.inlier_threshold_px")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kp3d", description="Keypoint-based monocular visual odometry toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("vo", help="frame-to-frame visual odometry over a sequence directory")
    p.add_argument("sequence")
    p.add_argument("--output", help="pose file (default: <sequence>/poses_est.txt)")
    _add_common(p)
    p.set_defaults(func=cmd_vo)

    p = sub.add_parser("eval-traj", help="Sim(3)-aligned and raw KITTI drift of a pose file")
    p.add_argument("estimate")
    p.add_argument("groundtruth")
    p.add_argument("--lengths", type=float, nargs="+", help="segment lengths in metres")
    p.add_argument("--step", type=int, default=1, help="stride between segment start frames")
    p.add_argument("--output", help="also write the report here")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_eval_traj)

    p = sub.add_parser("eval-kp", help="keypoint metrics for two feature files and a homography")
    p.add_argument("features_a")
    p.add_argument("features_b")
    p.add_argument("homography", help="text file with the 3x3 homography mapping a to b")
    p.add_argument("--output", help="also write the report here")
    _add_common(p)
    p.set_defaults(func=cmd_eval_kp)

    p = sub.add_parser("synth", help="write a synthetic sequence directory")
    p.add_argument("--output", required=True, help="sequence directory to create")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="analytic versus finite-difference gradient table")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--only", nargs="+", metavar="CHECK", help=f"subset of: {', '.join(gradcheck.CHECKS)}")
    p.add_argument("--output", help="also write the report here")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report, code = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FormatError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationFailedError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except Kp3dError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    text = report.render(args.format)
    sys.stdout.write(text)
    if args.command in ("eval-traj", "eval-kp", "gradcheck") and args.output:
        atomic_write(args.output, text.encode())
    return code


if __name__ == "__main__":
    sys.exit(main())
