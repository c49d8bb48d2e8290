"""Command-line surface: simulate, train, odometry, eval, gradcheck, inspect.

Exit codes: 0 success, 2 bad configuration, 3 data error, 4 numerical
failure.  All runs are deterministic given the config seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation as ev
from . import fileio
from . import gradcheck as gc
from . import liegroup as lg
from . import simworld as sw
from .errors import (
    AngleNearPi, CholeskyFailure, ConfigError, DivergedSolve, EmptyCloud,
    MalformedFile, NoTrainableWindows, SingularInformation, TrajectoryTooShort,
    WindowRejected,
)
from .features import ModelParams
from .learning import em_train
from .odometry import run_odometry

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (MalformedFile, EmptyCloud, NoTrainableWindows,
                TrajectoryTooShort, OSError, ValueError)
_NUMERIC_ERRORS = (SingularInformation, DivergedSolve, CholeskyFailure,
                   AngleNearPi, WindowRejected)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _build_trajectory(cfg: dict):
    sim = cfg["sim"]
    if sim["trajectory"] == "constant":
        nu = np.array([sim["speed"], 0.0, 0.0, 0.0, 0.0, 0.0])
        start = np.eye(4)
        start[2, 3] = 1.6
        return sw.constant_twist_trajectory(sim["duration"], sim["rate"], nu,
                                            start_sensor_pose=start)
    if sim["trajectory"] == "wnoa":
        from .trajectory import MotionPriorConfig
        knots = sw.simulate_trajectory(
            MotionPriorConfig(np.asarray(cfg["pipeline"]["qc_diag"])),
            sim["duration"], sim["rate"], cfg["seed"],
            init_velocity=np.array([-sim["speed"], 0, 0, 0, 0, 0]))
        return knots
    return sw.wobble_trajectory(sim["duration"], sim["rate"], sim["speed"])


def _build_world(cfg: dict) -> sw.WorldSpec:
    sim = cfg["sim"]
    if sim["world"] == "urban_block":
        return sw.default_urban_block(length=sim["world_length"])
    return sw.world_from_json(json.loads(Path(sim["world"]).read_text()))


def cmd_simulate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    out = Path(args.out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    world = _build_world(cfg)
    sensor = cfgmod.sensor_spec(cfg)
    knots = _build_trajectory(cfg)
    clouds = sw.scan_sequence(world, sensor, knots, cfg["seed"])
    for i, cloud in enumerate(clouds):
        fileio.write_velodyne_bin(out / "scans" / f"{i:06d}.bin", cloud)
    fileio.write_kitti_poses(out / "poses_gt.txt",
                             [lg.inv_pose(k.pose) for k in knots])
    fileio.write_timestamps(out / "times.txt", [k.stamp for k in knots])
    (out / "world.json").write_text(
        json.dumps(sw.world_to_json(world), indent=1) + "\n")
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    _log(f"simulate: wrote {len(clouds)} scans to {out}")
    return 0


def _load_sequence(data_dir, rate: float):
    data = Path(data_dir)
    scan_paths = sorted((data / "scans").glob("*.bin"))
    if not scan_paths:
        scan_paths = sorted(data.glob("*.bin"))
    if not scan_paths:
        raise MalformedFile(f"no .bin scans under {data}")
    clouds = [fileio.read_velodyne_bin(p) for p in scan_paths]
    times_file = data / "times.txt"
    if times_file.exists():
        stamps = fileio.read_timestamps(times_file)
        if len(stamps) != len(clouds):
            raise MalformedFile(f"{times_file}: {len(stamps)} stamps for "
                                f"{len(clouds)} scans")
    else:
        stamps = [i / rate for i in range(len(clouds))]  # fixed-rate default
    for cloud, stamp in zip(clouds, stamps):
        cloud.stamp = stamp
    return clouds


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    clouds = _load_sequence(args.data, cfg["sim"]["rate"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, report, adam = em_train(
        [clouds], cfgmod.pipeline_config(cfg), cfgmod.train_config(cfg))
    fileio.save_checkpoint(out / "checkpoint.json", params, adam,
                           fileio.config_hash(cfg))
    fileio.write_loss_csv(out / "loss.csv", report)
    summary = {
        "epochs_run": len(report.epoch_mean_losses),
        "epoch_mean_losses": report.epoch_mean_losses,
        "rejected_windows": report.rejected_windows,
    }
    (out / "train_report.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _log(f"train: {len(report.window_losses)} windows, "
         f"{len(report.epoch_mean_losses)} epochs -> {out}")
    return 0


def cmd_odometry(args) -> int:
    cfg = cfgmod.load_config(args.config)
    clouds = _load_sequence(args.data, cfg["sim"]["rate"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        params, _, ck_hash = fileio.load_checkpoint(args.checkpoint)
        if ck_hash and ck_hash != fileio.config_hash(cfg):
            _log("odometry: warning: checkpoint was trained under a "
                 "different configuration")
    else:
        params = ModelParams.initialize(cfg["seed"])
        _log("odometry: no checkpoint given, using randomly initialized "
             "parameters")
    run = run_odometry(clouds, params, cfgmod.pipeline_config(cfg),
                       window=cfg["train"]["window"],
                       collect_diagnostics=bool(args.diagnostics))
    fileio.write_kitti_poses(out / "traj_est.txt", run.trajectory)
    fileio.write_covariances_csv(out / "cov.csv", run.result.rel_covs,
                                 run.result.stamps)
    if args.diagnostics:
        lines = ["frame,x,y,z,score,sphericity,source"]
        for d in run.diagnostics:
            src = d.source if d.source is not None else \
                np.full(len(d.scores), -1)
            for p, s, sp, so in zip(d.points, d.scores, d.sphericity, src):
                lines.append(f"{d.frame},{p[0]:.4f},{p[1]:.4f},{p[2]:.4f},"
                             f"{s:.6e},{sp:.6e},{int(so)}")
        Path(args.diagnostics).write_text("\n".join(lines) + "\n")
    _log(f"odometry: {len(run.result.rel_poses)} relative poses -> {out}")
    return 0


def cmd_eval(args) -> int:
    est = fileio.read_kitti_poses(args.est)
    gt = fileio.read_kitti_poses(args.gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg = ev.kitti_segment_errors(est, gt)
    lines = ["length_m,translation_pct,rotation_deg_per_100m,count"]
    for row in seg.per_length:
        lines.append(f"{row[0]:.0f},{row[1]:.6f},{row[2]:.6f},{row[3]}")
    (out / "segments.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "translation_pct": seg.translation_pct,
        "rotation_deg_per_100m": seg.rotation_deg_per_100m,
    }
    if args.cov:
        stamps, covs = fileio.read_covariances_csv(args.cov)
        if len(covs) != len(est) - 1:
            raise MalformedFile("covariance rows do not match trajectory steps")
        result = ev.OdometryResult(ev.gt_relative_poses(est), covs, stamps)
        summary["avg_mahalanobis"] = ev.avg_mahalanobis(
            result, ev.gt_relative_poses(gt))
    (out / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _log(f"eval: translation {seg.translation_pct:.3f} %, rotation "
         f"{seg.rotation_deg_per_100m:.3f} deg/100m")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(seed=args.seed)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name}: max rel err {r.max_rel_err:.3e} "
              f"(tol {r.tol:.0e})")
        failed = failed or not r.passed
    return EXIT_NUMERIC if failed else 0


def cmd_inspect(args) -> int:
    if args.defaults:
        print(cfgmod.dump_defaults())
        return 0
    if not args.data:
        raise ConfigError("inspect needs --data unless --defaults is given")
    cfg = cfgmod.load_config(args.config)
    clouds = _load_sequence(args.data, cfg["sim"]["rate"])
    w = cfg["train"]["window"]
    start = args.start
    if start + w > len(clouds):
        raise MalformedFile(f"window [{start}, {start + w}) out of range")
    if args.checkpoint:
        params, _, _ = fileio.load_checkpoint(args.checkpoint)
    else:
        params = ModelParams.initialize(cfg["seed"])
    from .learning import forward_minibatch
    fwd = forward_minibatch(clouds[start:start + w], params,
                            cfgmod.pipeline_config(cfg), cubature=False)
    from .features import beta_metric, sphericity
    lines = ["frame,keypoint,x,y,z,mx,my,mz,beta_metric,sphericity,beta_pass"]
    for m in fwd.factor_set.measurements:
        z = m.coords
        r = m.ref_point
        lines.append(
            f"{m.frame_index},{m.keypoint_index},"
            f"{z[0]:.4f},{z[1]:.4f},{z[2]:.4f},"
            f"{r[0]:.4f},{r[1]:.4f},{r[2]:.4f},"
            f"{beta_metric(m.covparams):.6e},{sphericity(m.winv):.6e},"
            f"{int(m.beta_pass)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _log(f"inspect: wrote {len(lines) - 1} keypoints to {args.out}")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lodem",
        description="Sliding-window lidar odometry with unsupervised "
                    "learning of detector scores and measurement covariances.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scan sequence")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run EM training on a scan directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("odometry", help="sliding-window inference")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", default=None,
                   help="write per-point score/sphericity CSV here")
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("eval", help="segment drift and consistency metrics")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--cov", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump keypoints/matches of one window")
    p.add_argument("--defaults", action="store_true",
                   help="print the default config JSON and exit")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"error (config): {exc}")
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        _log(f"error (numeric): {type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        _log(f"error (data): {type(exc).__name__}: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
