"""SE(3)/se(3) primitives: hat/vee, exp/log maps, adjoints, left Jacobians.

Twists are ordered [rho; psi]: translational part first, rotational part
second.  Poses are 4x4 homogeneous matrices.  Every perturbation in this
package is left-multiplicative, T <- exp_se3(delta) @ T.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AngleNearPi

# Rotation angles closer to pi than this are rejected by the log map; the
# rotation axis extracted from R - R^T is ill-conditioned there.
ANGLE_PI_GUARD = 1e-6

# Switchover angles for the series branches of the trigonometric coefficient
# ratios below.  They are placed where the closed form still has ~1e-11
# relative accuracy and the truncated series is already at machine precision,
# so both branches agree far below test tolerances at the boundary.
_TAYLOR_SINC = 1e-4
_TAYLOR_RATIO = 1e-2
_TAYLOR_Q = 5e-2


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 skew-symmetric matrix of a 3-vector (hat operator on so(3))."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def hat(xi: np.ndarray) -> np.ndarray:
    """4x4 se(3) matrix of a twist [rho; psi]."""
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi[3:6])
    out[:3, 3] = xi[:3]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat`."""
    return np.array([m[0, 3], m[1, 3], m[2, 3], m[2, 1], m[0, 2], m[1, 0]])


def _sinc(x: float) -> float:
    # sin(x)/x
    if abs(x) < _TAYLOR_SINC:
        x2 = x * x
        return 1.0 - x2 / 6.0 + x2 * x2 / 120.0
    return math.sin(x) / x


def _one_minus_cos_over_x2(x: float) -> float:
    # (1 - cos x)/x^2 via the half-angle identity; stable for all x.
    s = _sinc(0.5 * x)
    return 0.5 * s * s


def _x_minus_sin_over_x3(x: float) -> float:
    # (x - sin x)/x^3
    if abs(x) < _TAYLOR_RATIO:
        x2 = x * x
        return 1.0 / 6.0 - x2 / 120.0 + x2 * x2 / 5040.0
    return (x - math.sin(x)) / (x * x * x)


def _jinv_so3_coeff(x: float) -> float:
    # (1/x^2) (1 - (x/2) cot(x/2))
    if abs(x) < _TAYLOR_RATIO:
        x2 = x * x
        return 1.0 / 12.0 + x2 / 720.0 + x2 * x2 / 30240.0
    h = 0.5 * x
    return (1.0 - h * math.cos(h) / math.sin(h)) / (x * x)


def _q_coeff2(x: float) -> float:
    # (x^2/2 + cos x - 1)/x^4
    if abs(x) < _TAYLOR_Q:
        x2 = x * x
        return 1.0 / 24.0 - x2 / 720.0 + x2 * x2 / 40320.0
    return (0.5 * x * x + math.cos(x) - 1.0) / (x * x * x * x)


def _q_coeff3(x: float) -> float:
    # (x - sin x - x^3/6)/x^5
    if abs(x) < _TAYLOR_Q:
        x2 = x * x
        return -1.0 / 120.0 + x2 / 5040.0 - x2 * x2 / 362880.0
    return (x - math.sin(x) - x * x * x / 6.0) / x**5


def so3_exp(psi: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector."""
    angle = float(np.linalg.norm(psi))
    k = skew(psi)
    return (
        np.eye(3)
        + _sinc(angle) * k
        + _one_minus_cos_over_x2(angle) * (k @ k)
    )


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector from a rotation matrix.

    Raises
    ------
    AngleNearPi
        If the rotation angle is within ``ANGLE_PI_GUARD`` of pi.
    """
    v = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    cos_angle = 0.5 * (np.trace(rot) - 1.0)
    sin_angle = 0.5 * float(np.linalg.norm(v))
    angle = math.atan2(sin_angle, cos_angle)
    if math.pi - angle < ANGLE_PI_GUARD:
        raise AngleNearPi(f"rotation angle {angle} within guard band of pi")
    if angle < _TAYLOR_RATIO:
        a2 = angle * angle
        factor = 0.5 + a2 / 12.0 + 7.0 * a2 * a2 / 720.0
    else:
        factor = 0.5 * angle / math.sin(angle)
    return factor * v


def so3_left_jacobian(psi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(psi))
    k = skew(psi)
    return (
        np.eye(3)
        + _one_minus_cos_over_x2(angle) * k
        + _x_minus_sin_over_x3(angle) * (k @ k)
    )


def so3_left_jacobian_inv(psi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(psi))
    k = skew(psi)
    return np.eye(3) - 0.5 * k + _jinv_so3_coeff(angle) * (k @ k)


def exp_se3(xi: np.ndarray) -> np.ndarray:
    """4x4 pose from a twist [rho; psi]."""
    rho, psi = xi[:3], xi[3:6]
    out = np.eye(4)
    out[:3, :3] = so3_exp(psi)
    out[:3, 3] = so3_left_jacobian(psi) @ rho
    return out


def log_se3(pose: np.ndarray) -> np.ndarray:
    """Twist [rho; psi] from a pose.

    Raises
    ------
    AngleNearPi
        If the rotation angle is within ``ANGLE_PI_GUARD`` of pi.
    """
    psi = so3_log(pose[:3, :3])
    rho = so3_left_jacobian_inv(psi) @ pose[:3, 3]
    return np.concatenate([rho, psi])


def inv_pose(pose: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a homogeneous transform."""
    out = np.eye(4)
    rt = pose[:3, :3].T
    out[:3, :3] = rt
    out[:3, 3] = -rt @ pose[:3, 3]
    return out


def adjoint(pose: np.ndarray) -> np.ndarray:
    """6x6 adjoint of a pose for the [rho; psi] twist ordering."""
    rot = pose[:3, :3]
    out = np.zeros((6, 6))
    out[:3, :3] = rot
    out[:3, 3:] = skew(pose[:3, 3]) @ rot
    out[3:, 3:] = rot
    return out


def ad_se3(xi: np.ndarray) -> np.ndarray:
    """6x6 adjoint of a twist (Lie bracket operator ad_xi y = [xi, y])."""
    px = skew(xi[3:6])
    out = np.zeros((6, 6))
    out[:3, :3] = px
    out[:3, 3:] = skew(xi[:3])
    out[3:, 3:] = px
    return out


def _se3_jac_q(rho: np.ndarray, psi: np.ndarray) -> np.ndarray:
    # Top-right block of the SE(3) left Jacobian.
    angle = float(np.linalg.norm(psi))
    rx = skew(rho)
    px = skew(psi)
    pxrx = px @ rx
    rxpx = rx @ px
    pxpx = px @ px
    c1 = _x_minus_sin_over_x3(angle)
    c2 = _q_coeff2(angle)
    c3 = _q_coeff3(angle)
    return (
        0.5 * rx
        + c1 * (pxrx + rxpx + px @ rxpx)
        + c2 * (pxpx @ rx + rx @ pxpx - 3.0 * px @ rxpx)
        + 0.5 * (c2 + 3.0 * c3) * (pxrx @ pxpx + pxpx @ rxpx)
    )


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 left Jacobian of SE(3)."""
    jac = so3_left_jacobian(xi[3:6])
    out = np.zeros((6, 6))
    out[:3, :3] = jac
    out[:3, 3:] = _se3_jac_q(xi[:3], xi[3:6])
    out[3:, 3:] = jac
    return out


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse of the 6x6 left Jacobian; requires ||psi|| < pi."""
    angle = float(np.linalg.norm(xi[3:6]))
    if angle >= math.pi - ANGLE_PI_GUARD:
        raise AngleNearPi(f"rotation angle {angle} too close to pi for inverse Jacobian")
    jinv = so3_left_jacobian_inv(xi[3:6])
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[:3, 3:] = -jinv @ _se3_jac_q(xi[:3], xi[3:6]) @ jinv
    out[3:, 3:] = jinv
    return out


def rotation_angle(rot: np.ndarray) -> float:
    """Rotation angle in [0, pi] of a rotation matrix."""
    v = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    return math.atan2(0.5 * float(np.linalg.norm(v)), 0.5 * (np.trace(rot) - 1.0))


def project_pose(pose: np.ndarray) -> np.ndarray:
    """Re-orthonormalize the rotation block via polar decomposition.

    Used to control drift after long multiplicative compose chains.
    """
    u, _, vt = np.linalg.svd(pose[:3, :3])
    rot = u @ np.diag([1.0, 1.0, float(np.linalg.det(u @ vt))]) @ vt
    out = np.eye(4)
    out[:3, :3] = rot
    out[:3, 3] = pose[:3, 3]
    return out


def is_pose(pose: np.ndarray, tol: float = 1e-9) -> bool:
    """Check the homogeneous-transform invariants of a 4x4 matrix."""
    if pose.shape != (4, 4):
        return False
    rot = pose[:3, :3]
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > tol:
        return False
    if abs(np.linalg.det(rot) - 1.0) > tol:
        return False
    return bool(np.all(pose[3] == np.array([0.0, 0.0, 0.0, 1.0])))
