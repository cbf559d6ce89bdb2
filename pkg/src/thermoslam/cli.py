"""Command-line front end.

Verbs:
  slam      run the pipeline over a dataset directory
  eval      compare an estimated TUM trajectory against ground truth
  sim       generate a synthetic stereo dataset
  features  precompute or inspect feature files
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evalsim, features as feat, report
from .config import PipelineConfig, load_config
from .errors import ThermoSlamError
from .pipeline import run_slam
from .preproc import ThermalPreprocessor, load_raw_image


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.sync:
        cfg.run.sync = True
    if getattr(args, "no_loop", False):
        cfg.loopclose.enabled = False
    if getattr(args, "no_seg", False):
        cfg.dynfilter.enabled = False
    if getattr(args, "no_dt", False):
        cfg.tracking.dual_level = False
    if getattr(args, "provider", None):
        cfg.features.provider = args.provider
    return cfg.validate()


def cmd_slam(args):
    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else Path(args.dataset) / "out"
    seeds = [cfg.run.seed + i for i in range(cfg.run.best_of)]
    gt_path = Path(args.dataset) / "gt.txt"
    best = None
    for seed in seeds:
        cfg.run.seed = seed
        result = run_slam(cfg, args.dataset, out)
        if len(seeds) == 1 or not gt_path.is_file():
            best = result
            break
        gt = evalsim.load_tum(gt_path)
        ate = evalsim.compute_metrics(result.trajectory, gt).ate_rmse
        if best is None or ate < best[0]:
            best = (ate, result)
    if isinstance(best, tuple):
        best = best[1]
        evalsim.save_tum(out / "trajectory.txt", best.trajectory)
        best.manifest.write(out / "manifest.json")
    print(f"frames: {best.manifest.frames}  keyframes: {best.manifest.keyframes}  "
          f"map points: {best.manifest.map_points}  loops: {best.manifest.loop_closures}")
    if gt_path.is_file():
        gt = evalsim.load_tum(gt_path)
        m = evalsim.compute_metrics(best.trajectory, gt)
        report.emit_report(out, best.trajectory, gt, m)
        print(report.format_report(m), end="")
    return best.status


def cmd_eval(args):
    est = evalsim.load_tum(args.est)
    gt = evalsim.load_tum(args.gt)
    m = evalsim.compute_metrics(est, gt, mode=args.mode)
    out = Path(args.out) if args.out else Path(args.est).parent / "eval"
    report.emit_report(out, est, gt, m, mode=args.mode)
    print(report.format_report(m), end="")
    return 0


def cmd_sim(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    seed = args.seed if args.seed is not None else cfg.run.seed
    noise = evalsim.NoiseSpec(
        pixel_sigma=args.pixel_sigma,
        bit_flip_rate=args.bit_flip_rate,
        intensity_sigma=args.intensity_sigma,
    )
    world = evalsim.circle_world(
        radius=args.radius,
        n_frames=args.frames,
        n_landmarks=args.landmarks,
        n_clusters=args.clusters,
        noise=noise,
        seed=seed,
    )
    out = evalsim.generate_dataset(world, args.out, seed=seed)
    print(f"wrote {args.frames}-frame dataset to {out}")
    return 0


def cmd_features(args):
    if args.inspect:
        fs = feat.load_features(args.inspect)
        print(f"{args.inspect}: {len(fs)} keypoints @ t={fs.timestamp:.6f}")
        if len(fs):
            print(f"  u range [{fs.uv[:, 0].min():.1f}, {fs.uv[:, 0].max():.1f}]  "
                  f"v range [{fs.uv[:, 1].min():.1f}, {fs.uv[:, 1].max():.1f}]")
            print(f"  mean score {fs.scores.mean():.4f}")
        return 0
    cfg = _load_cfg(args)
    root = Path(args.dataset)
    out = Path(args.out) if args.out else root / "features"
    out.mkdir(parents=True, exist_ok=True)
    for side in ("left", "right"):
        pre = ThermalPreprocessor(cfg.preproc.alpha, cfg.preproc.low_percentile,
                                  cfg.preproc.high_percentile)
        for img_path in sorted((root / side).glob("*.png"), key=lambda p: float(p.stem)):
            frame = pre.process(load_raw_image(img_path, float(img_path.stem)))
            fs = feat.detect_features(frame, cfg.features.max_points)
            suffix = ".feat" if side == "left" else "_right.feat"
            feat.save_features(out / f"{img_path.stem}{suffix}", fs)
    print(f"wrote feature files to {out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="thermoslam")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="pipeline config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--sync", action="store_true",
                       help="serialize mapping/loop work for determinism")
        p.add_argument("--out", help="output directory")
        if dataset:
            p.add_argument("dataset", help="dataset directory")

    p = sub.add_parser("slam", help="run the SLAM pipeline")
    common(p)
    p.add_argument("--no-loop", action="store_true", help="disable loop closing")
    p.add_argument("--no-seg", action="store_true", help="disable dynamic-point filtering")
    p.add_argument("--no-dt", action="store_true",
                   help="disable photometric pre-alignment (matching-only tracking)")
    p.add_argument("--provider", choices=("builtin", "file"))
    p.set_defaults(fn=cmd_slam)

    p = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--mode", choices=("se3", "sim3"), default="sim3")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sim", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=400)
    p.add_argument("--radius", type=float, default=50.0)
    p.add_argument("--landmarks", type=int, default=3000)
    p.add_argument("--clusters", type=int, default=0)
    p.add_argument("--pixel-sigma", type=float, default=0.0)
    p.add_argument("--bit-flip-rate", type=float, default=0.0)
    p.add_argument("--intensity-sigma", type=float, default=0.0)
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("features", help="precompute or inspect feature files")
    common(p, dataset=False)
    p.add_argument("dataset", nargs="?", help="dataset directory (for precompute)")
    p.add_argument("--inspect", help="print a summary of one .feat file")
    p.set_defaults(fn=cmd_features)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ThermoSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
