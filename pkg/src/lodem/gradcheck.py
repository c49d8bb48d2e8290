"""Finite-difference verification of every analytic gradient in the package.

Each suite compares an analytic Jacobian or gradient against central finite
differences on randomly generated instances and reports the worst relative
error.  The CLI command exits nonzero when any suite exceeds its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import factors as fc
from . import features as ft
from . import liegroup as lg
from . import solver as sv
from .learning import PipelineConfig, _forward_prepared, mstep_gradient, prepare_frame
from .trajectory import StateKnot, wnoa_error, wnoa_jacobians


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)),
                                             np.max(np.abs(b)), floor))


def check_liegroup_jacobians(n_cases: int = 20, seed: int = 0) -> CheckResult:
    """left_jacobian columns vs numeric differentiation of exp_se3."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n_cases):
        xi = rng.normal(size=6)
        xi[3:] *= 1.5 / max(1.0, np.linalg.norm(xi[3:]))
        jac = lg.left_jacobian(xi)
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            plus = lg.log_se3(lg.exp_se3(xi + e) @ lg.inv_pose(lg.exp_se3(xi)))
            minus = lg.log_se3(lg.exp_se3(xi - e) @ lg.inv_pose(lg.exp_se3(xi)))
            worst = max(worst, _rel((plus - minus) / (2 * h), jac[:, i], 1.0))
    return CheckResult("liegroup left_jacobian vs exp", worst, 1e-5)


def _perturb_knot(knot, d):
    return StateKnot(knot.stamp, lg.exp_se3(d[:6]) @ knot.pose,
                     knot.velocity + d[6:])


def check_wnoa_jacobians(n_cases: int = 20, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n_cases):
        prev = StateKnot(0.0, lg.exp_se3(rng.normal(size=6) * 0.4),
                         rng.normal(size=6))
        nxt = StateKnot(rng.uniform(0.05, 0.5),
                        lg.exp_se3(rng.normal(size=6) * 0.4),
                        rng.normal(size=6))
        j_prev, j_next = wnoa_jacobians(prev, nxt)
        for i in range(12):
            d = np.zeros(12)
            d[i] = h
            fd = (wnoa_error(_perturb_knot(prev, d), nxt)
                  - wnoa_error(_perturb_knot(prev, -d), nxt)) / (2 * h)
            worst = max(worst, _rel(fd, j_prev[:, i], 1.0))
            fd = (wnoa_error(prev, _perturb_knot(nxt, d))
                  - wnoa_error(prev, _perturb_knot(nxt, -d))) / (2 * h)
            worst = max(worst, _rel(fd, j_next[:, i], 1.0))
    return CheckResult("wnoa error jacobians", worst, 1e-5)


def check_measurement_jacobians(n_cases: int = 20, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n_cases):
        factor = fc.MeasurementFactor(
            frame_index=1, keypoint_index=0, coords=rng.normal(size=3),
            ref_point=rng.normal(size=3) * 5.0,
            winv=np.eye(3), covparams=np.zeros(6))
        pose_k = lg.exp_se3(rng.normal(size=6) * 0.5)
        pose_r = lg.exp_se3(rng.normal(size=6) * 0.5)
        j_k = fc.measurement_jacobian_pose(factor, pose_k, pose_r)
        j_r = fc.measurement_jacobian_ref(factor, pose_k, pose_r)
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            fd = (fc.measurement_error(factor, lg.exp_se3(d) @ pose_k, pose_r)
                  - fc.measurement_error(factor, lg.exp_se3(-d) @ pose_k, pose_r)
                  ) / (2 * h)
            worst = max(worst, _rel(fd, j_k[:, i], 1.0))
            fd = (fc.measurement_error(factor, pose_k, lg.exp_se3(d) @ pose_r)
                  - fc.measurement_error(factor, pose_k, lg.exp_se3(-d) @ pose_r)
                  ) / (2 * h)
            worst = max(worst, _rel(fd, j_r[:, i], 1.0))
    return CheckResult("measurement error jacobians", worst, 1e-5)


def check_backbone_heads(n_cases: int = 20, seed: int = 3) -> CheckResult:
    """Head outputs vs finite differences through every weight."""
    rng = np.random.default_rng(seed)
    params = ft.ModelParams.initialize(seed)
    feats = rng.normal(size=(8, ft.FEATURE_DIM))
    vec = params.to_vector()
    # scalar probe: weighted sum of all outputs
    w_s = rng.normal(size=8)
    w_c = rng.normal(size=(8, 6))

    def loss_of(v):
        p = ft.ModelParams.from_vector(v)
        out = ft.backbone_forward(p, feats)
        return float(w_s @ out.scores + np.sum(w_c * out.covparams))

    outputs = ft.backbone_forward(params, feats)
    grad = ft._heads_backward(params, feats, outputs, w_s, w_c)
    idx = rng.choice(vec.size, size=n_cases, replace=False)
    worst = 0.0
    h = 1e-6
    for i in idx:
        dv = np.zeros_like(vec)
        dv[i] = h
        fd = (loss_of(vec + dv) - loss_of(vec - dv)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6))
    return CheckResult("backbone head gradients", worst, 1e-5)


def _toy_window(seed: int, n_pts: int = 60, w: int = 3):
    """Small synthetic window with distinct per-point features."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-12.0, 12.0, size=(n_pts, 3))
    pts[:, 2] = rng.uniform(0.0, 4.0, size=n_pts)
    inten = rng.uniform(0.05, 0.95, size=n_pts)
    frames = []
    for k in range(w):
        motion = lg.exp_se3(np.array([0.4 * k, 0.02 * k, 0.0, 0.0, 0.0, 0.015 * k]))
        moved = pts @ motion[:3, :3].T + motion[:3, 3]
        frames.append(ft.PointCloud(moved, inten, stamp=0.1 * k))
    return frames


def check_mstep_gradient(n_weights: int = 20, seed: int = 4,
                         cubature: bool = True) -> CheckResult:
    """Full parameter gradient vs finite differences of the loss at fixed q."""
    rng = np.random.default_rng(seed)
    cfg = PipelineConfig(subsample_grid=0.4, keypoint_grid=3.0,
                         feature_radius=1.0, match_temperature=0.01,
                         beta=0.0, gn_max_iters=12)
    clouds = _toy_window(seed)
    prepared = [prepare_frame(c, cfg) for c in clouds]
    params = ft.ModelParams.initialize(seed + 7)
    alpha = 1e9  # keep every factor so the FD loss is the analytic objective
    fwd = _forward_prepared(prepared, params, cfg, cubature)
    grad, _ = mstep_gradient(fwd, params, alpha)

    posterior = fwd.posterior
    ref_pose = posterior.knots[0].pose
    marginals = {}
    for k in {m.frame_index for m in fwd.factor_set.measurements}:
        _, marginals[k] = posterior.marginal([k])

    def loss_of(vec):
        p = ft.ModelParams.from_vector(vec)
        total = 0.0
        ref = prepared[0]
        ref_desc = ft.unit_descriptors(ref.feats)
        for k in range(1, len(prepared)):
            frame = prepared[k]
            outputs = ft.backbone_forward(p, frame.feats)
            cloud = ft.PointCloud(frame.points, frame.intensity, frame.stamp)
            kps = ft.aggregate_keypoints(cloud, frame.feats, outputs.scores,
                                         outputs.covparams, cfg.keypoint_grid)
            match = ft.match_keypoints(kps, ref_desc, ref.points,
                                       cfg.match_temperature)
            for j, kp in enumerate(kps):
                factor = fc.MeasurementFactor(
                    frame_index=k, keypoint_index=j, coords=kp.coords,
                    ref_point=match.matched[j], winv=kp.winv,
                    covparams=kp.covparams)
                total += sv.expected_factor_cost(
                    factor, posterior.knots[k].pose, ref_pose,
                    marginals[k] if cubature else None,
                    mode="cubature" if cubature else "mean")
        return total

    vec = params.to_vector()
    scale = np.max(np.abs(grad))
    candidates = np.nonzero(np.abs(grad) >= 1e-6 * scale)[0]
    idx = rng.choice(candidates, size=min(n_weights, candidates.size),
                     replace=False)
    worst = 0.0
    h = 1e-5
    for i in idx:
        dv = np.zeros_like(vec)
        dv[i] = h
        fd = (loss_of(vec + dv) - loss_of(vec - dv)) / (2 * h)
        worst = max(worst,
                    abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-4 * scale))
    return CheckResult("m-step parameter gradient", worst, 1e-4)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_liegroup_jacobians(seed=seed),
        check_wnoa_jacobians(seed=seed + 1),
        check_measurement_jacobians(seed=seed + 2),
        check_backbone_heads(seed=seed + 3),
        check_mstep_gradient(seed=seed + 4, cubature=True),
        check_mstep_gradient(seed=seed + 5, cubature=False),
    ]
