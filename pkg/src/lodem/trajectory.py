"""Latent-state containers and the white-noise-on-acceleration motion prior.

A trajectory knot holds the pose T_{k,0} (world->sensor) and the 6-DOF body
velocity.  Consecutive knots are tied by the discrete WNOA factor whose error
is zero exactly on constant-twist motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import liegroup as lg
from .errors import NonMonotonicStamps, NonPositiveDt, SingularInformation

# Hand-set power spectral density for urban driving: strong along the travel
# axis and yaw, weak on lateral/vertical slip and roll/pitch.  Tunable via
# config; units (m/s^2)^2 s and (rad/s^2)^2 s.
DEFAULT_QC_DIAG = (0.3**2, 0.03**2, 0.03**2, 0.01**2, 0.01**2, 0.1**2)


@dataclass(frozen=True)
class StateKnot:
    """Single trajectory knot: timestamp, pose T_{k,0} and body velocity."""

    stamp: float
    pose: np.ndarray      # (4, 4)
    velocity: np.ndarray  # (6,) [rho; psi] rates


@dataclass(frozen=True)
class MotionPriorConfig:
    """Diagonal power-spectral density of the acceleration white noise."""

    qc_diag: np.ndarray = field(
        default_factory=lambda: np.array(DEFAULT_QC_DIAG)
    )

    def __post_init__(self):
        qc = np.asarray(self.qc_diag, dtype=float)
        if qc.shape != (6,) or not np.all(qc > 0.0):
            raise ValueError("qc_diag must be 6 positive reals")
        object.__setattr__(self, "qc_diag", qc)


def wnoa_error(prev: StateKnot, next_: StateKnot) -> np.ndarray:
    """12-vector prior error between consecutive knots.

    Rows are [pose row; velocity row]:

        e_pose = log(T_next T_prev^-1) - dt * w_prev
        e_vel  = Jinv(log(T_next T_prev^-1)) w_next - w_prev

    Zero on any constant-twist trajectory.
    """
    dt = next_.stamp - prev.stamp
    if dt <= 0.0:
        raise NonMonotonicStamps(f"stamps {prev.stamp} -> {next_.stamp}")
    xi = lg.log_se3(next_.pose @ lg.inv_pose(prev.pose))
    e_pose = xi - dt * prev.velocity
    e_vel = lg.left_jacobian_inv(xi) @ next_.velocity - prev.velocity
    return np.concatenate([e_pose, e_vel])


def wnoa_information(dt: float, cfg: MotionPriorConfig) -> np.ndarray:
    """Inverse of the 12x12 discrete WNOA covariance for a step of dt seconds."""
    if dt <= 0.0:
        raise NonPositiveDt(f"dt = {dt}")
    qc_inv = 1.0 / cfg.qc_diag
    out = np.zeros((12, 12))
    out[:6, :6] = np.diag(12.0 / dt**3 * qc_inv)
    out[:6, 6:] = np.diag(-6.0 / dt**2 * qc_inv)
    out[6:, :6] = out[:6, 6:]
    out[6:, 6:] = np.diag(4.0 / dt * qc_inv)
    return out


# Bernoulli numbers B_n / n! for the inverse-left-Jacobian series
# Jinv(xi) = sum_n (B_n/n!) ad(xi)^n  (B_1 = -1/2 convention; odd B_n>1 = 0).
_BERNOULLI = {
    0: Fraction(1),
    1: Fraction(-1, 2),
    2: Fraction(1, 6),
    4: Fraction(-1, 30),
    6: Fraction(1, 42),
    8: Fraction(-1, 30),
    10: Fraction(5, 66),
    12: Fraction(-691, 2730),
    14: Fraction(7, 6),
    16: Fraction(-3617, 510),
    18: Fraction(43867, 798),
    20: Fraction(-174611, 330),
    22: Fraction(854513, 138),
    24: Fraction(-236364091, 2730),
    26: Fraction(8553103, 6),
    28: Fraction(-23749461029, 870),
    30: Fraction(8615841276005, 14322),
}


def _bernoulli_over_factorial(n: int) -> float:
    b = _BERNOULLI.get(n)
    if b is None:
        return 0.0
    f = 1
    for i in range(2, n + 1):
        f *= i
    return float(b) / f


_JINV_COEFFS = [_bernoulli_over_factorial(n) for n in range(31)]


def _jinv_vec_jacobian(xi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact derivative of xi -> Jinv(xi) w as a 6x6 matrix.

    Differentiates the Bernoulli series term by term using the bracket
    antisymmetry ad(d) y = -ad(y) d.  Converges for ||psi|| well below 2*pi;
    in the prior factors xi is an inter-knot increment and is small.
    """
    ad = lg.ad_se3(xi)
    n_max = len(_JINV_COEFFS) - 1
    powers = [np.eye(6)]
    vecs = [w]
    for _ in range(n_max):
        powers.append(powers[-1] @ ad)
        vecs.append(ad @ vecs[-1])
    out = np.zeros((6, 6))
    for n in range(1, n_max + 1):
        c = _JINV_COEFFS[n]
        if c == 0.0:
            continue
        term = np.zeros((6, 6))
        for k in range(n):
            term += powers[k] @ lg.ad_se3(vecs[n - 1 - k])
        out -= c * term
    return out


def wnoa_jacobians(prev: StateKnot, next_: StateKnot) -> tuple[np.ndarray, np.ndarray]:
    """Analytic 12x12 Jacobians of :func:`wnoa_error`.

    Jacobians are with respect to left-multiplicative pose perturbations and
    additive velocity perturbations of each knot, column order
    [d_pose(6); d_velocity(6)].
    """
    dt = next_.stamp - prev.stamp
    if dt <= 0.0:
        raise NonMonotonicStamps(f"stamps {prev.stamp} -> {next_.stamp}")
    rel = next_.pose @ lg.inv_pose(prev.pose)
    xi = lg.log_se3(rel)
    jinv = lg.left_jacobian_inv(xi)
    dxi_dprev = -jinv @ lg.adjoint(rel)
    dxi_dnext = jinv
    dvel = _jinv_vec_jacobian(xi, next_.velocity)

    j_prev = np.zeros((12, 12))
    j_prev[:6, :6] = dxi_dprev
    j_prev[:6, 6:] = -dt * np.eye(6)
    j_prev[6:, :6] = dvel @ dxi_dprev
    j_prev[6:, 6:] = -np.eye(6)

    j_next = np.zeros((12, 12))
    j_next[:6, :6] = dxi_dnext
    j_next[6:, :6] = dvel @ dxi_dnext
    j_next[6:, 6:] = jinv
    return j_prev, j_next


class GaussianPosterior:
    """Gaussian over the optimized knots: mean knots plus information matrix.

    ``knots`` includes the locked reference at index 0, which carries no
    uncertainty; ``info`` covers the remaining knots with 12 DOF each in
    time order, per-knot blocks [d_pose; d_velocity].
    """

    def __init__(self, knots, info, cost_history=None):
        self.knots = list(knots)
        self.info = np.asarray(info, dtype=float)
        self.cost_history = cost_history
        n = 12 * (len(self.knots) - 1)
        if self.info.shape != (n, n):
            raise ValueError(f"info shape {self.info.shape} != ({n}, {n})")
        scale = max(np.max(np.abs(self.info)), 1.0)
        if np.max(np.abs(self.info - self.info.T)) > 1e-8 * scale:
            raise SingularInformation("information matrix is not symmetric")
        self._chol = None
        self._marginal_cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def locked_index(self) -> int:
        return 0

    def block_slice(self, knot_index: int) -> slice:
        """Slice of the information matrix for an optimized knot."""
        if knot_index < 1 or knot_index >= len(self.knots):
            raise IndexError(f"knot {knot_index} is locked or out of range")
        return slice(12 * (knot_index - 1), 12 * knot_index)

    def _cholesky(self) -> np.ndarray:
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.info)
            except np.linalg.LinAlgError as exc:
                raise SingularInformation(str(exc)) from exc
        return self._chol

    def marginal(self, knot_indices) -> tuple[list[StateKnot], np.ndarray]:
        """Mean knots and covariance block for the requested optimized knots."""
        key = tuple(int(i) for i in knot_indices)
        if key not in self._marginal_cache:
            cols = np.concatenate([np.arange(self.block_slice(i).start,
                                             self.block_slice(i).stop)
                                   for i in key])
            chol = self._cholesky()
            rhs = np.eye(self.info.shape[0])[:, cols]
            half = np.linalg.solve(chol, rhs)
            sigma_cols = np.linalg.solve(chol.T, half)
            cov = sigma_cols[cols, :]
            self._marginal_cache[key] = 0.5 * (cov + cov.T)
        return [self.knots[i] for i in key], self._marginal_cache[key]

    def half_logdet_info(self) -> float:
        """0.5 * ln|Sigma^-1|, the Gaussian entropy term up to constants."""
        chol = self._cholesky()
        return float(np.sum(np.log(np.diag(chol))))
