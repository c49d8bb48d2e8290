"""Measurement factors, robust weighting and the two outlier gates.

Each measurement factor ties a keypoint of a non-reference frame to its soft
match in the locked reference frame.  Its cost is the Gaussian log-likelihood
0.5 e^T W e - ln|W|; the log-determinant barrier is what keeps the learned
inverse covariances from collapsing to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .features import beta_metric

# Constant 3x4 projector dropping the homogeneous coordinate.
PROJECT = np.hstack([np.eye(3), np.zeros((3, 1))])


@dataclass
class MeasurementFactor:
    """Keypoint observation z in frame k against reference point r in frame tau."""

    frame_index: int        # window-local index k of the observing knot
    keypoint_index: int     # index into that frame's keypoint list
    coords: np.ndarray      # (3,) z, keypoint coordinates in frame k
    ref_point: np.ndarray   # (3,) r, matched point in the reference frame
    winv: np.ndarray        # (3, 3) SPD inverse measurement covariance
    covparams: np.ndarray   # (6,) LDU parameters behind winv
    beta_pass: bool = True  # False: excluded from the E-step, kept for backprop


@dataclass
class PriorFactor:
    """WNOA prior between consecutive knots with its 12x12 information."""

    prev_index: int
    next_index: int
    info: np.ndarray


@dataclass
class FactorSet:
    """All factors of one window; measurements reference only the locked frame."""

    priors: list = field(default_factory=list)
    measurements: list = field(default_factory=list)
    locked_reference: int = 0

    def validate(self, num_knots: int) -> None:
        pairs = {(p.prev_index, p.next_index) for p in self.priors}
        expected = {(i, i + 1) for i in range(num_knots - 1)}
        if pairs != expected:
            raise ValueError("priors must connect every consecutive knot pair")
        for m in self.measurements:
            if m.frame_index == self.locked_reference:
                raise ValueError("measurement factor on the locked reference")
            if not 0 <= m.frame_index < num_knots:
                raise ValueError(f"measurement frame {m.frame_index} out of range")


def transformed_ref(factor: MeasurementFactor, pose_k: np.ndarray,
                    pose_ref: np.ndarray) -> np.ndarray:
    """Reference match expressed in frame k: (T_k0 T_tau0^-1 [r; 1])_{xyz}."""
    rel = pose_k @ lg.inv_pose(pose_ref)
    return rel[:3, :3] @ factor.ref_point + rel[:3, 3]


def measurement_error(factor: MeasurementFactor, pose_k: np.ndarray,
                      pose_ref: np.ndarray) -> np.ndarray:
    """e = z - D T_{k,0} T_{tau,0}^-1 [r; 1]."""
    return factor.coords - transformed_ref(factor, pose_k, pose_ref)


def measurement_jacobian_pose(factor: MeasurementFactor, pose_k: np.ndarray,
                              pose_ref: np.ndarray) -> np.ndarray:
    """(3, 6) Jacobian of the error w.r.t. a left perturbation of T_{k,0}."""
    a = transformed_ref(factor, pose_k, pose_ref)
    out = np.zeros((3, 6))
    out[:, :3] = -np.eye(3)
    out[:, 3:] = lg.skew(a)
    return out


def measurement_jacobian_ref(factor: MeasurementFactor, pose_k: np.ndarray,
                             pose_ref: np.ndarray) -> np.ndarray:
    """(3, 6) Jacobian w.r.t. a left perturbation of the reference pose.

    Unused by the solver (the reference is locked) but kept for gradient
    checking the error model end to end.
    """
    rel = pose_k @ lg.inv_pose(pose_ref)
    rot = rel[:3, :3]
    out = np.zeros((3, 6))
    out[:, :3] = rot
    out[:, 3:] = -rot @ lg.skew(factor.ref_point)
    return out


def factor_cost(factor: MeasurementFactor, pose_k: np.ndarray,
                pose_ref: np.ndarray) -> float:
    """0.5 e^T W e - ln|W|, with ln|W| = d1 + d2 + d3 by the LDU identity."""
    e = measurement_error(factor, pose_k, pose_ref)
    return 0.5 * float(e @ factor.winv @ e) - float(np.sum(factor.covparams[3:6]))


def geman_mcclure_weight(mahalanobis_sq: float) -> float:
    """IRLS weight 1/(1 + u^2)^2 for the unit-scale Geman-McClure cost."""
    return 1.0 / (1.0 + mahalanobis_sq) ** 2


def geman_mcclure_cost(mahalanobis_sq: float) -> float:
    """Robust cost u^2 / (2 (1 + u^2)); its IRLS weight is 1/(1+u^2)^2."""
    return mahalanobis_sq / (2.0 * (1.0 + mahalanobis_sq))


def alpha_gate(factor: MeasurementFactor, pose_k: np.ndarray,
               pose_ref: np.ndarray, alpha: float) -> bool:
    """True when the factor is kept for parameter backprop.

    Drops factors whose squared Mahalanobis error at the posterior mean
    exceeds alpha; the E-step is unaffected by this gate.
    """
    e = measurement_error(factor, pose_k, pose_ref)
    return float(e @ factor.winv @ e) <= alpha


def beta_gate(factor: MeasurementFactor, beta: float) -> bool:
    """True when the factor is kept in the E-step.

    Drops keypoints whose anisotropy proxy exp(d_min - d_max) is below
    beta; such factors are still backpropagated in the M-step.
    """
    return beta_metric(factor.covparams) >= beta
