"""Odometry evaluation: segment drift metrics, relative pose error and the
normalized Mahalanobis consistency statistic.

Trajectories are lists of 4x4 sensor-in-world poses.  Segment errors follow
the standard odometry benchmark convention: endpoint relative-pose errors
over segments of 100..800 m, segment starts strided every 10 m of arc
length, translation reported as a percentage of segment length and rotation
as degrees per 100 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .errors import TrajectoryTooShort

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
SEGMENT_START_STRIDE = 10.0  # meters of groundtruth arc length


@dataclass
class OdometryResult:
    """Per-step relative poses T_{k,k-1} with their 6x6 covariances."""

    rel_poses: list = field(default_factory=list)
    rel_covs: list = field(default_factory=list)
    stamps: list = field(default_factory=list)

    def trajectory(self, start: np.ndarray | None = None) -> list[np.ndarray]:
        """Accumulated sensor-in-world trajectory from the relative poses.

        Relative poses follow the estimator convention T_{k,k-1} (frame k-1
        to frame k), so the sensor-in-world pose chains on the right:
        P_k = P_{k-1} @ T_{k,k-1}^-1.  The rotation block is re-orthonormalized
        every 100 composes to control accumulation drift.
        """
        pose = np.eye(4) if start is None else start.copy()
        out = [pose.copy()]
        for i, rel in enumerate(self.rel_poses):
            pose = pose @ lg.inv_pose(rel)
            if (i + 1) % 100 == 0:
                pose = lg.project_pose(pose)
            out.append(pose.copy())
        return out


def relative_pose_error(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Left-composed 6-DOF error log(T_est T_gt^-1)."""
    return lg.log_se3(est @ lg.inv_pose(gt))


def _cumulative_distances(poses) -> np.ndarray:
    pts = np.stack([p[:3, 3] for p in poses])
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass
class SegmentErrors:
    """Averaged drift metrics plus the per-length table behind them."""

    translation_pct: float
    rotation_deg_per_100m: float
    per_length: list  # (length, translation_pct, rotation_deg_per_100m, count)


def kitti_segment_errors(est_poses, gt_poses,
                         lengths=SEGMENT_LENGTHS,
                         stride: float = SEGMENT_START_STRIDE) -> SegmentErrors:
    """Benchmark-style segment drift of an estimated trajectory.

    Both trajectories are pose lists of equal length (sensor-in-world).
    Raises TrajectoryTooShort when the groundtruth path is shorter than the
    smallest segment length.
    """
    if len(est_poses) != len(gt_poses):
        raise ValueError("trajectory lengths differ")
    dist = _cumulative_distances(gt_poses)
    if dist[-1] < min(lengths):
        raise TrajectoryTooShort(
            f"groundtruth path {dist[-1]:.1f} m < {min(lengths)} m")

    starts = []
    next_start = 0.0
    for i, d in enumerate(dist):
        if d >= next_start:
            starts.append(i)
            next_start += stride

    per_length = []
    for length in lengths:
        t_errs = []
        r_errs = []
        for first in starts:
            target = dist[first] + length
            last = int(np.searchsorted(dist, target))
            if last >= len(dist):
                continue
            delta_gt = lg.inv_pose(gt_poses[first]) @ gt_poses[last]
            delta_est = lg.inv_pose(est_poses[first]) @ est_poses[last]
            err = lg.inv_pose(delta_est) @ delta_gt
            seg = dist[last] - dist[first]
            t_errs.append(np.linalg.norm(err[:3, 3]) / seg)
            r_errs.append(lg.rotation_angle(err[:3, :3]) / seg)
        if t_errs:
            per_length.append((
                length,
                100.0 * float(np.mean(t_errs)),
                math.degrees(float(np.mean(r_errs))) * 100.0,
                len(t_errs),
            ))
    if not per_length:
        raise TrajectoryTooShort("no complete segments found")
    return SegmentErrors(
        translation_pct=float(np.mean([p[1] for p in per_length])),
        rotation_deg_per_100m=float(np.mean([p[2] for p in per_length])),
        per_length=per_length,
    )


def avg_mahalanobis(result: OdometryResult, gt_rel_poses) -> float:
    """Normalized consistency statistic of the relative-pose errors.

    sqrt( sum_k xi_k^T Q_k^-1 xi_k / (6 K) ) with xi_k the 6-DOF relative
    pose error; a calibrated estimator gives values near 1.
    """
    if len(result.rel_poses) != len(gt_rel_poses):
        raise ValueError("estimate / groundtruth length mismatch")
    total = 0.0
    k = len(result.rel_poses)
    for est, gt, cov in zip(result.rel_poses, gt_rel_poses, result.rel_covs):
        xi = relative_pose_error(est, gt)
        total += float(xi @ np.linalg.solve(cov, xi))
    return math.sqrt(total / (6.0 * k))


def gt_relative_poses(knots_or_poses) -> list[np.ndarray]:
    """T_{k,k-1} sequence from a trajectory of sensor-in-world poses."""
    out = []
    for prev, cur in zip(knots_or_poses, knots_or_poses[1:]):
        out.append(lg.inv_pose(cur) @ prev)
    return out
