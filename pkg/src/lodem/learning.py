"""EM training loop: MAP E-step in the forward pass, gradient M-step on the
measurement factors, Adam parameter updates.

The posterior is held fixed through the M-step gradient -- no gradient flows
through the solver.  The alpha gate removes outlier factors from backprop
only; the beta gate removes low-quality keypoints from the E-step only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import factors as fc
from . import features as ft
from . import liegroup as lg
from . import solver as sv
from .errors import AngleNearPi, NoTrainableWindows, StaleRecords, WindowRejected
from .trajectory import MotionPriorConfig, StateKnot, wnoa_information


@dataclass(frozen=True)
class PipelineConfig:
    """Feature, matching, prior and solver settings shared by train and test."""

    subsample_grid: float = 0.3      # input voxel size dl0, meters
    keypoint_grid: float = 1.6       # keypoint voxel size dg, meters
    feature_radius: float = 0.6      # neighbourhood radius = 2 * dl0
    match_temperature: float = 0.01  # softmax temperature on unit dot products
    beta: float = 0.05               # E-step anisotropy gate
    qc_diag: tuple = (0.3**2, 0.03**2, 0.03**2, 0.01**2, 0.01**2, 0.1**2)
    gn_tol: float = 1e-6
    gn_max_iters: int = 50

    def motion_prior(self) -> MotionPriorConfig:
        return MotionPriorConfig(np.asarray(self.qc_diag, dtype=float))

    def gn_options(self) -> sv.GaussNewtonOptions:
        return sv.GaussNewtonOptions(tol=self.gn_tol, max_iters=self.gn_max_iters)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the EM loop."""

    window: int = 4
    epochs: int = 12
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 4.0       # Mahalanobis gate on M-step backprop
    cubature: bool = True    # sigmapoint expectation of the loss
    seed: int = 0
    augment: bool = True     # random z-rotations of each window
    min_rel_improvement: float = 1e-4

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


@dataclass
class TrainReport:
    """Per-window losses and bookkeeping of one training run."""

    window_losses: list = field(default_factory=list)
    epoch_mean_losses: list = field(default_factory=list)
    alpha_gated: list = field(default_factory=list)
    beta_gated: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    rejected_windows: int = 0
    wall_time: float = 0.0


@dataclass
class PreparedFrame:
    """Subsampled cloud plus its fixed geometric features."""

    points: np.ndarray
    intensity: np.ndarray
    feats: np.ndarray
    stamp: float
    source: np.ndarray | None = None


def prepare_frame(cloud: ft.PointCloud, cfg: PipelineConfig) -> PreparedFrame:
    sub = ft.subsample_voxel(cloud, cfg.subsample_grid)
    feats = ft.compute_point_features(sub, cfg.feature_radius)
    return PreparedFrame(sub.points, sub.intensity, feats, sub.stamp, sub.source)


def rotate_frame(frame: PreparedFrame, angle: float) -> PreparedFrame:
    """z-axis rotation of a prepared frame.

    All feature channels except the normal are invariant under a z-rotation
    about the sensor origin, so only points and normal columns change.
    """
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    feats = frame.feats.copy()
    feats[:, 3:6] = feats[:, 3:6] @ rot.T
    return PreparedFrame(frame.points @ rot.T, frame.intensity, feats,
                         frame.stamp, frame.source)


def _rotation_pose(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = np.eye(4)
    out[:2, :2] = np.array([[c, -s], [s, c]])
    return out


def rotate_knot(knot: StateKnot, angle: float) -> StateKnot:
    """Conjugate a knot into the frame of z-rotated clouds.

    When every cloud of a window is rotated p -> R p, the solved poses
    transform as T -> R T R^-1 and velocities by the adjoint of R.
    """
    rot = _rotation_pose(angle)
    return StateKnot(knot.stamp,
                     rot @ knot.pose @ lg.inv_pose(rot),
                     lg.adjoint(rot) @ knot.velocity)


@dataclass
class WindowForward:
    """Everything the M-step needs from one window's forward pass."""

    posterior: object                    # GaussianPosterior
    factor_set: fc.FactorSet
    records: list                        # per-frame FrameRecords (index 0 = reference)
    loss: float
    entropy: float
    beta_gated: int
    cubature: bool


def _forward_prepared(frames: list[PreparedFrame], params: ft.ModelParams,
                      cfg: PipelineConfig, cubature: bool,
                      initial_knots: list[StateKnot] | None = None,
                      robust: bool = True) -> WindowForward:
    stamps = [f.stamp for f in frames]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise WindowRejected("stamps must be strictly increasing")

    records = []
    ref = frames[0]
    ref_desc = ft.unit_descriptors(ref.feats)
    for i, frame in enumerate(frames):
        cloud = ft.PointCloud(frame.points, frame.intensity, frame.stamp)
        outputs = ft.backbone_forward(params, frame.feats)
        if i == 0:
            records.append(ft.FrameRecords(frame.points, frame.feats, outputs,
                                           [], None, None, None))
            continue
        kps = ft.aggregate_keypoints(cloud, frame.feats, outputs.scores,
                                     outputs.covparams, cfg.keypoint_grid)
        match = ft.match_keypoints(kps, ref_desc, ref.points,
                                   cfg.match_temperature)
        records.append(ft.FrameRecords(frame.points, frame.feats, outputs,
                                       kps, match, ref_desc, ref.points,
                                       cfg.match_temperature))

    fset = fc.FactorSet(locked_reference=0)
    prior_cfg = cfg.motion_prior()
    for i in range(len(frames) - 1):
        dt = stamps[i + 1] - stamps[i]
        fset.priors.append(fc.PriorFactor(i, i + 1, wnoa_information(dt, prior_cfg)))
    beta_gated = 0
    for k in range(1, len(frames)):
        rec = records[k]
        for j, kp in enumerate(rec.keypoints):
            factor = fc.MeasurementFactor(
                frame_index=k, keypoint_index=j, coords=kp.coords,
                ref_point=rec.match.matched[j], winv=kp.winv,
                covparams=kp.covparams)
            factor.beta_pass = fc.beta_gate(factor, cfg.beta)
            beta_gated += 0 if factor.beta_pass else 1
            fset.measurements.append(factor)

    if initial_knots is None:
        initial_knots = [
            StateKnot(s, np.eye(4), np.zeros(6)) for s in stamps
        ]
    opts = sv.GaussNewtonOptions(tol=cfg.gn_tol, max_iters=cfg.gn_max_iters,
                                 robust=robust)
    try:
        posterior = sv.gauss_newton_solve(
            sv.WindowProblem(initial_knots, fset, opts))
    except AngleNearPi as exc:
        raise WindowRejected(str(exc)) from exc

    loss = _measurement_loss(posterior, fset, cubature)
    return WindowForward(posterior, fset, records, loss,
                         posterior.half_logdet_info(), beta_gated, cubature)


def _knot_marginals(posterior, fset):
    out = {}
    frames = {m.frame_index for m in fset.measurements}
    for k in frames:
        _, cov = posterior.marginal([k])
        out[k] = cov
    return out


def _sigma_poses(posterior, frame_index, cov):
    """Perturbed poses of one knot under its 12-DOF cubature sigmapoints."""
    sp = sv.cubature_points(np.zeros(12), cov)
    mean = posterior.knots[frame_index].pose
    poses = [lg.exp_se3(p[:6]) @ mean for p in sp.points]
    return poses, sp.weights


def _frame_factor_arrays(fset, frame_index):
    ms = [m for m in fset.measurements if m.frame_index == frame_index]
    z = np.stack([m.coords for m in ms])
    r = np.stack([m.ref_point for m in ms])
    winv = np.stack([m.winv for m in ms])
    dsum = np.array([np.sum(m.covparams[3:6]) for m in ms])
    kp_idx = np.array([m.keypoint_index for m in ms])
    return ms, z, r, winv, dsum, kp_idx


def _measurement_loss(posterior, fset, cubature: bool) -> float:
    """Sum of expected factor costs over all measurement factors.

    Beta-gated factors are included (they stay in the learning objective);
    motion priors are excluded as constants with respect to the parameters.
    The state-independent -ln|W| term is evaluated once per factor.
    """
    ref_inv = lg.inv_pose(posterior.knots[fset.locked_reference].pose)
    marginals = _knot_marginals(posterior, fset) if cubature else {}
    total = 0.0
    for k in sorted({m.frame_index for m in fset.measurements}):
        _, z, r, winv, dsum, _ = _frame_factor_arrays(fset, k)
        if cubature:
            poses, weights = _sigma_poses(posterior, k, marginals[k])
        else:
            poses, weights = [posterior.knots[k].pose], np.array([1.0])
        quad = np.zeros(z.shape[0])
        for pose, w in zip(poses, weights):
            rel = pose @ ref_inv
            e = z - (r @ rel[:3, :3].T + rel[:3, 3])
            quad += w * 0.5 * np.einsum("fi,fij,fj->f", e, winv, e)
        total += float(np.sum(quad) - np.sum(dsum))
    return total


def forward_minibatch(clouds: list[ft.PointCloud], params: ft.ModelParams,
                      cfg: PipelineConfig, cubature: bool = True,
                      initial_knots: list[StateKnot] | None = None
                      ) -> WindowForward:
    """Features -> factors -> E-step -> loss for one window of clouds.

    Without ``initial_knots`` the window starts from identity poses and zero
    velocities, which is exact for sequences starting at rest.
    """
    frames = [prepare_frame(c, cfg) for c in clouds]
    return _forward_prepared(frames, params, cfg, cubature,
                             initial_knots=initial_knots)


def _warm_start(prev_knots: list[StateKnot], stamps: list[float]
                ) -> list[StateKnot]:
    """Initial knots for the next window from the previous window's solution.

    Carries the overlapping knots over and extrapolates the incoming frame
    at constant velocity.
    """
    carried = list(prev_knots[1:])
    last = carried[-1]
    dt = stamps[-1] - last.stamp
    carried.append(StateKnot(
        stamps[-1], lg.exp_se3(dt * last.velocity) @ last.pose,
        last.velocity.copy()))
    return carried


def mstep_gradient(fwd: WindowForward, params: ft.ModelParams, alpha: float
                   ) -> tuple[np.ndarray, int]:
    """Gradient of the measurement loss w.r.t. the parameters at fixed posterior.

    Skips alpha-gated factors (squared Mahalanobis above alpha at the
    posterior mean); returns (flat gradient, number gated).
    """
    if fwd.records is None:
        raise StaleRecords("forward records unavailable")
    posterior = fwd.posterior
    fset = fwd.factor_set
    ref_inv = lg.inv_pose(posterior.knots[fset.locked_reference].pose)
    marginals = _knot_marginals(posterior, fset) if fwd.cubature else {}

    grad = np.zeros(params.num_parameters())
    n_gated = 0
    for k in sorted({m.frame_index for m in fset.measurements}):
        _, z, r, winv, _, kp_idx = _frame_factor_arrays(fset, k)
        mean_pose = posterior.knots[k].pose

        # alpha gate at the posterior mean
        rel = mean_pose @ ref_inv
        e_mean = z - (r @ rel[:3, :3].T + rel[:3, 3])
        u2 = np.einsum("fi,fij,fj->f", e_mean, winv, e_mean)
        keep = u2 <= alpha
        n_gated += int(np.sum(~keep))
        if not np.any(keep):
            continue

        if fwd.cubature:
            poses, weights = _sigma_poses(posterior, k, marginals[k])
        else:
            poses, weights = [mean_pose], np.array([1.0])
        nf = z.shape[0]
        g_z = np.zeros((nf, 3))
        g_r = np.zeros((nf, 3))
        ee = np.zeros((nf, 3, 3))
        for pose, w in zip(poses, weights):
            rel = pose @ ref_inv
            e = z - (r @ rel[:3, :3].T + rel[:3, 3])
            we = np.einsum("fij,fj->fi", winv, e)
            g_z += w * we
            g_r -= w * (we @ rel[:3, :3])
            ee += w * e[:, :, None] * e[:, None, :]
        g_w = 0.5 * ee - np.linalg.inv(winv)

        rec = fwd.records[k]
        n_kp = len(rec.keypoints)
        g_coords = np.zeros((n_kp, 3))
        g_winv = np.zeros((n_kp, 3, 3))
        g_matched = np.zeros((n_kp, 3))
        g_coords[kp_idx[keep]] = g_z[keep]
        g_winv[kp_idx[keep]] = g_w[keep]
        g_matched[kp_idx[keep]] = g_r[keep]
        grad += ft.backbone_backward(params, rec, g_coords, g_winv, g_matched)
    return grad, n_gated


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(params: ft.ModelParams, grad: np.ndarray, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> tuple[ft.ModelParams, AdamState]:
    """One bias-corrected Adam step; functional on params and state."""
    vec = params.to_vector()
    if grad.shape != vec.shape:
        raise ValueError("gradient shape does not match parameters")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    vec = vec - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ft.ModelParams.from_vector(vec), AdamState(m, v, step)


def em_train(sequences: list[list[ft.PointCloud]], cfg: PipelineConfig,
             train_cfg: TrainConfig,
             params: ft.ModelParams | None = None,
             adam_state: AdamState | None = None
             ) -> tuple[ft.ModelParams, TrainReport, AdamState]:
    """Generalized EM over sliding windows treated as minibatches.

    Windows are processed in sequence order so every E-step warm-starts from
    the previous window's solution (the first window of a sequence starts
    from rest).  Each window runs the forward pass (E-step included), one
    M-step gradient and one Adam update.  Stops at the epoch cap or when the
    epoch-mean loss stops improving by ``min_rel_improvement`` relative.
    """
    w = train_cfg.window
    if not any(len(seq) >= w for seq in sequences):
        raise NoTrainableWindows(f"no sequence has {w} or more frames")

    prepared = [[prepare_frame(c, cfg) for c in seq] for seq in sequences]
    if params is None:
        params = ft.ModelParams.initialize(train_cfg.seed)
    if adam_state is None:
        adam_state = AdamState.zeros(params.num_parameters())
    rng = np.random.default_rng(train_cfg.seed)
    report = TrainReport()
    t0 = time.perf_counter()

    prev_epoch = np.inf
    for _ in range(train_cfg.epochs):
        seq_order = rng.permutation(len(prepared))
        epoch_losses = []
        for si in seq_order:
            seq = prepared[si]
            warm = None  # previous solution in the unrotated frame
            for st in range(len(seq) - w + 1):
                frames = seq[st:st + w]
                stamps = [f.stamp for f in frames]
                angle = float(rng.uniform(0.0, 2.0 * math.pi)) \
                    if train_cfg.augment else 0.0
                if angle != 0.0:
                    frames = [rotate_frame(f, angle) for f in frames]
                init = None
                if warm is not None:
                    init = [rotate_knot(k, angle)
                            for k in _warm_start(warm, stamps)]
                try:
                    fwd = _forward_prepared(frames, params, cfg,
                                            train_cfg.cubature,
                                            initial_knots=init)
                except WindowRejected:
                    report.rejected_windows += 1
                    warm = None
                    continue
                warm = [rotate_knot(k, -angle) for k in fwd.posterior.knots]
                grad, n_alpha = mstep_gradient(fwd, params, train_cfg.alpha)
                params, adam_state = adam_update(
                    params, grad, adam_state, train_cfg.learning_rate,
                    train_cfg.adam_beta1, train_cfg.adam_beta2,
                    train_cfg.adam_eps)
                epoch_losses.append(fwd.loss)
                report.window_losses.append(fwd.loss)
                report.alpha_gated.append(n_alpha)
                report.beta_gated.append(fwd.beta_gated)
                report.grad_norms.append(float(np.linalg.norm(grad)))
                report.entropy.append(fwd.entropy)
        if not epoch_losses:
            raise NoTrainableWindows("every window was rejected")
        mean_loss = float(np.mean(epoch_losses))
        report.epoch_mean_losses.append(mean_loss)
        if np.isfinite(prev_epoch):
            rel = (prev_epoch - mean_loss) / max(abs(prev_epoch), 1e-12)
            if rel < train_cfg.min_rel_improvement:
                break
        prev_epoch = mean_loss
    report.wall_time = time.perf_counter() - t0
    return params, report, adam_state
