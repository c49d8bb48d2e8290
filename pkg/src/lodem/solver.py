"""Sliding-window Gauss-Newton MAP solver with IRLS robust weighting.

The window state is the set of optimized knots (the first knot is the locked
reference), 12 DOF each, updated left-multiplicatively.  Marginal covariance
extraction and the spherical-cubature sigmapoint rule used by the parameter
learning step live here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factors as fc
from . import liegroup as lg
from .errors import CholeskyFailure, DivergedSolve, SingularInformation
from .trajectory import GaussianPosterior, StateKnot


@dataclass(frozen=True)
class GaussNewtonOptions:
    tol: float = 1e-6          # convergence on max |dx|
    max_iters: int = 50
    robust: bool = True        # Geman-McClure IRLS on measurement factors
    diverge_patience: int = 5  # consecutive cost increases before giving up


@dataclass
class WindowProblem:
    """One window: initial knots (first locked) plus its factor set."""

    knots: list                      # list[StateKnot], knots[0] locked
    factors: fc.FactorSet
    options: GaussNewtonOptions = field(default_factory=GaussNewtonOptions)


def _apply_update(knots: list, dx: np.ndarray) -> list:
    out = [knots[0]]
    for i in range(1, len(knots)):
        d = dx[12 * (i - 1):12 * i]
        out.append(StateKnot(
            knots[i].stamp,
            lg.exp_se3(d[:6]) @ knots[i].pose,
            knots[i].velocity + d[6:],
        ))
    return out


class _MeasBlock:
    """Measurement factors of one frame stacked for vectorized linearization."""

    def __init__(self, frame_index, factors):
        self.frame_index = frame_index
        self.z = np.stack([f.coords for f in factors])
        self.r = np.stack([f.ref_point for f in factors])
        self.winv = np.stack([f.winv for f in factors])


def _stack_measurements(fset, estep_only=True):
    by_frame = {}
    for m in fset.measurements:
        if estep_only and not m.beta_pass:
            continue
        by_frame.setdefault(m.frame_index, []).append(m)
    return [_MeasBlock(k, fs) for k, fs in sorted(by_frame.items())]


def _linearize(knots, fset, blocks, robust):
    """Assemble H, g and the robust total cost at the current state."""
    n_opt = len(knots) - 1
    dim = 12 * n_opt
    h = np.zeros((dim, dim))
    g = np.zeros(dim)
    cost = 0.0

    from .trajectory import wnoa_error, wnoa_jacobians  # avoid import cycle

    for p in fset.priors:
        e = wnoa_error(knots[p.prev_index], knots[p.next_index])
        j_prev, j_next = wnoa_jacobians(knots[p.prev_index], knots[p.next_index])
        cost += 0.5 * float(e @ p.info @ e)
        pairs = []
        if p.prev_index > 0:
            pairs.append((p.prev_index, j_prev))
        if p.next_index > 0:
            pairs.append((p.next_index, j_next))
        for ki, ji in pairs:
            si = slice(12 * (ki - 1), 12 * ki)
            g[si] += ji.T @ (p.info @ e)
            for kj, jj in pairs:
                sj = slice(12 * (kj - 1), 12 * kj)
                h[si, sj] += ji.T @ p.info @ jj

    ref_inv = lg.inv_pose(knots[fset.locked_reference].pose)
    for blk in blocks:
        rel = knots[blk.frame_index].pose @ ref_inv
        a = blk.r @ rel[:3, :3].T + rel[:3, 3]       # (F, 3) in frame k
        e = blk.z - a
        we = np.einsum("fij,fj->fi", blk.winv, e)
        u2 = np.einsum("fi,fi->f", e, we)
        if robust:
            w = 1.0 / (1.0 + u2) ** 2
            cost += float(np.sum(u2 / (2.0 * (1.0 + u2))))
        else:
            w = np.ones_like(u2)
            cost += 0.5 * float(np.sum(u2))
        # J = [-I | skew(a)]: fold the Jacobian blocks analytically
        jac = np.zeros((a.shape[0], 3, 6))
        jac[:, :, :3] = -np.eye(3)
        jac[:, 0, 4] = -a[:, 2]
        jac[:, 0, 5] = a[:, 1]
        jac[:, 1, 3] = a[:, 2]
        jac[:, 1, 5] = -a[:, 0]
        jac[:, 2, 3] = -a[:, 1]
        jac[:, 2, 4] = a[:, 0]
        si = slice(12 * (blk.frame_index - 1), 12 * (blk.frame_index - 1) + 6)
        g[si] += np.einsum("f,fia,fi->a", w, jac, we)
        h[si, si] += np.einsum("f,fia,fij,fjb->ab", w, jac, blk.winv, jac)
    return h, g, cost


def gauss_newton_solve(problem: WindowProblem) -> GaussianPosterior:
    """Iterate IRLS Gauss-Newton to the MAP window solution.

    Returns the mean knots and the information matrix of the final
    linearization.  Raises SingularInformation on rank-deficient geometry and
    DivergedSolve when the robust cost keeps increasing.
    """
    knots = list(problem.knots)
    fset = problem.factors
    fset.validate(len(knots))
    opts = problem.options

    frames_with_meas = {m.frame_index for m in fset.measurements if m.beta_pass}
    if not fset.priors and not all(
            i in frames_with_meas for i in range(1, len(knots))):
        raise SingularInformation("no priors and unconstrained frames present")

    blocks = _stack_measurements(fset)
    cost_history = []
    prev_cost = np.inf
    bad_steps = 0
    for _ in range(opts.max_iters):
        h, g, cost = _linearize(knots, fset, blocks, opts.robust)
        cost_history.append(cost)
        if cost > prev_cost + 1e-12:
            bad_steps += 1
            if bad_steps >= opts.diverge_patience:
                raise DivergedSolve(
                    f"cost increased {bad_steps} consecutive iterations")
        else:
            bad_steps = 0
        prev_cost = cost
        try:
            dx = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError as exc:
            raise SingularInformation(str(exc)) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularInformation("non-finite Gauss-Newton update")
        knots = _apply_update(knots, dx)
        if np.max(np.abs(dx)) < opts.tol:
            break

    h, _, cost = _linearize(knots, fset, blocks, opts.robust)
    cost_history.append(cost)
    return GaussianPosterior(knots, 0.5 * (h + h.T), cost_history=cost_history)


def marginal_covariance(posterior: GaussianPosterior, knot_indices):
    """Mean and covariance block of the requested optimized knots.

    Solves the information system only for the requested columns.
    """
    return posterior.marginal(knot_indices)


@dataclass(frozen=True)
class SigmaPointSet:
    """2n spherical-cubature points with uniform weights 1/(2n)."""

    points: np.ndarray   # (2n, n)
    weights: np.ndarray  # (2n,)


def cubature_points(mean: np.ndarray, cov: np.ndarray) -> SigmaPointSet:
    """Spherical-cubature rule: mean +- sqrt(n) * columns of chol(cov)."""
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[0]
    try:
        chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(str(exc)) from exc
    scaled = np.sqrt(n) * chol.T  # row j is sqrt(n) * (chol column j)
    points = np.vstack([mean + scaled, mean - scaled])
    return SigmaPointSet(points, np.full(2 * n, 0.5 / n))


def expected_factor_cost(factor: fc.MeasurementFactor, pose_mean: np.ndarray,
                         pose_ref: np.ndarray, cov: np.ndarray | None,
                         mode: str = "cubature") -> float:
    """Expectation of the factor cost under the knot's Gaussian marginal.

    ``cov`` is the 12x12 knot marginal (pose block first); the pose enters
    through left-multiplicative perturbations of the mean.  ``mode`` is
    "cubature" or "mean"; with a zero/absent covariance both agree.
    """
    if mode == "mean" or cov is None:
        return fc.factor_cost(factor, pose_mean, pose_ref)
    if mode != "cubature":
        raise ValueError(f"unknown mode {mode!r}")
    sp = cubature_points(np.zeros(cov.shape[0]), cov)
    total = 0.0
    for delta, w in zip(sp.points, sp.weights):
        quad_pose = lg.exp_se3(delta[:6]) @ pose_mean
        e = fc.measurement_error(factor, quad_pose, pose_ref)
        total += w * 0.5 * float(e @ factor.winv @ e)
    return total - float(np.sum(factor.covparams[3:6]))
