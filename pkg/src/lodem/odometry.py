"""Sliding-window odometry inference with trained (or raw) parameters.

Each slide locks the oldest remaining frame as the matching reference,
initializes the incoming frame by constant-velocity extrapolation and
re-solves the window.  The relative pose between the two newest frames is
the odometry output, with its covariance from the joint pose marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factors as fc
from . import features as ft
from . import liegroup as lg
from . import solver as sv
from .evaluation import OdometryResult
from .learning import PipelineConfig, PreparedFrame, _forward_prepared, prepare_frame
from .trajectory import StateKnot


@dataclass
class FrameDiagnostics:
    """Per-point network outputs of one frame (the data behind score and
    sphericity visualizations)."""

    frame: int
    points: np.ndarray
    scores: np.ndarray
    sphericity: np.ndarray
    source: np.ndarray | None


@dataclass
class OdometryRun:
    result: OdometryResult
    trajectory: list = field(default_factory=list)  # sensor-in-world poses
    diagnostics: list = field(default_factory=list)


def _relative_with_cov(posterior, idx_prev: int, idx_cur: int):
    """T_{cur,prev} and its covariance via the joint pose marginal."""
    rel = posterior.knots[idx_cur].pose @ lg.inv_pose(posterior.knots[idx_prev].pose)
    ad = lg.adjoint(rel)
    if idx_prev == 0:
        _, cov = posterior.marginal([idx_cur])
        rel_cov = cov[:6, :6]
    else:
        # joint marginal columns: [prev pose, prev vel, cur pose, cur vel];
        # a left perturbation of rel is d_cur - Ad(rel) d_prev
        _, cov = posterior.marginal([idx_prev, idx_cur])
        j = np.zeros((6, 24))
        j[:, 0:6] = -ad
        j[:, 12:18] = np.eye(6)
        rel_cov = j @ cov @ j.T
    return rel, 0.5 * (rel_cov + rel_cov.T)


def run_odometry(clouds, params: ft.ModelParams, cfg: PipelineConfig,
                 window: int = 4, collect_diagnostics: bool = False
                 ) -> OdometryRun:
    """Run the full pipeline over a scan sequence.

    Returns per-step relative poses/covariances, the accumulated trajectory
    and optional per-point diagnostics.
    """
    if len(clouds) < window:
        raise ValueError(f"need at least {window} frames, got {len(clouds)}")
    prepared = [prepare_frame(c, cfg) for c in clouds]

    diagnostics = []
    if collect_diagnostics:
        for i, frame in enumerate(prepared):
            outputs = ft.backbone_forward(params, frame.feats)
            sph = np.array([
                ft.sphericity(ft.compose_winv(cp)) for cp in outputs.covparams
            ])
            diagnostics.append(FrameDiagnostics(
                i, frame.points, outputs.scores, sph, frame.source))

    result = OdometryResult()
    global_knots: list[StateKnot | None] = [None] * len(clouds)
    prev_solution = None
    for start in range(0, len(clouds) - window + 1):
        frames = prepared[start:start + window]
        if prev_solution is None:
            init = [StateKnot(f.stamp, np.eye(4), np.zeros(6)) for f in frames]
        else:
            # warm start: carry over solved knots, extrapolate the new frame
            carried = prev_solution.knots[1:]
            last = carried[-1]
            dt = frames[-1].stamp - last.stamp
            init = list(carried) + [StateKnot(
                frames[-1].stamp,
                lg.exp_se3(dt * last.velocity) @ last.pose,
                last.velocity.copy(),
            )]
        fwd = _forward_prepared(frames, params, cfg, cubature=False,
                                initial_knots=init)
        posterior = fwd.posterior
        if start == 0:
            # bootstrap: emit every consecutive pair of the first window
            for k in range(1, window):
                rel, cov = _relative_with_cov(posterior, k - 1, k)
                result.rel_poses.append(rel)
                result.rel_covs.append(cov)
                result.stamps.append(frames[k].stamp)
        else:
            rel, cov = _relative_with_cov(posterior, window - 2, window - 1)
            result.rel_poses.append(rel)
            result.rel_covs.append(cov)
            result.stamps.append(frames[-1].stamp)
        prev_solution = posterior

    return OdometryRun(result, result.trajectory(), diagnostics)
