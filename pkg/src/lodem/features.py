"""Differentiable feature pipeline over fixed local-geometry point descriptors.

Per point we compute a fixed 10-D geometric feature vector; two small learned
heads map it to a scalar detector score and to 6 covariance parameters.
Keypoints are softmax-weighted voxel aggregates, inverse measurement
covariances come from an LDU composition of the 6 parameters, and data
association is a temperature-scaled softmax over descriptor dot products.
The backward pass through the whole pipeline is written by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, StaleRecords

FEATURE_DIM = 10
HIDDEN_DIM = 16
LEAKY_SLOPE = 0.1

# Feature column scales keep every channel O(1) so no single channel
# dominates the unit descriptor used for matching.
HEIGHT_SCALE = 5.0
RANGE_SCALE = 30.0
DENSITY_SCALE = 16.0

# Feature columns: 0:3 sorted covariance eigenvalue ratios (descending),
# 3:6 surface normal with sign flipped toward the sensor, 6 height above
# the sensor origin / HEIGHT_SCALE, 7 neighbourhood density, 8 intensity,
# 9 range / RANGE_SCALE.


@dataclass
class PointCloud:
    """Raw or subsampled lidar frame in the sensor frame."""

    points: np.ndarray     # (N, 3) meters
    intensity: np.ndarray  # (N,) in [0, 1]
    stamp: float = 0.0
    source: np.ndarray | None = None  # optional per-point primitive id

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class ModelParams:
    """Weights of the detector-score head and the covariance head."""

    det_w1: np.ndarray  # (HIDDEN_DIM, FEATURE_DIM)
    det_b1: np.ndarray  # (HIDDEN_DIM,)
    det_w2: np.ndarray  # (1, HIDDEN_DIM)
    det_b2: np.ndarray  # (1,)
    cov_w1: np.ndarray  # (HIDDEN_DIM, FEATURE_DIM)
    cov_b1: np.ndarray  # (HIDDEN_DIM,)
    cov_w2: np.ndarray  # (6, HIDDEN_DIM)
    cov_b2: np.ndarray  # (6,)

    _FIELDS = ("det_w1", "det_b1", "det_w2", "det_b2",
               "cov_w1", "cov_b1", "cov_w2", "cov_b2")

    @classmethod
    def initialize(cls, seed: int) -> "ModelParams":
        """Glorot-uniform weights, zero biases, deterministic given seed."""
        rng = np.random.default_rng(seed)

        def glorot(rows, cols):
            bound = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-bound, bound, size=(rows, cols))

        return cls(
            det_w1=glorot(HIDDEN_DIM, FEATURE_DIM),
            det_b1=np.zeros(HIDDEN_DIM),
            det_w2=glorot(1, HIDDEN_DIM),
            det_b2=np.zeros(1),
            cov_w1=glorot(HIDDEN_DIM, FEATURE_DIM),
            cov_b1=np.zeros(HIDDEN_DIM),
            cov_w2=glorot(6, HIDDEN_DIM),
            cov_b2=np.zeros(6),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in self._FIELDS])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ModelParams":
        shapes = {
            "det_w1": (HIDDEN_DIM, FEATURE_DIM), "det_b1": (HIDDEN_DIM,),
            "det_w2": (1, HIDDEN_DIM), "det_b2": (1,),
            "cov_w1": (HIDDEN_DIM, FEATURE_DIM), "cov_b1": (HIDDEN_DIM,),
            "cov_w2": (6, HIDDEN_DIM), "cov_b2": (6,),
        }
        out = {}
        off = 0
        for name in cls._FIELDS:
            shape = shapes[name]
            size = int(np.prod(shape))
            out[name] = np.asarray(vec[off:off + size], dtype=float).reshape(shape).copy()
            off += size
        if off != vec.size:
            raise ValueError(f"expected vector of size {off}, got {vec.size}")
        return cls(**out)

    def num_parameters(self) -> int:
        return sum(getattr(self, f).size for f in self._FIELDS)

    def copy(self) -> "ModelParams":
        return ModelParams(**{f: getattr(self, f).copy() for f in self._FIELDS})

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**{f: np.asarray(d[f], dtype=float) for f in cls._FIELDS})


@dataclass
class Keypoint:
    """Softmax-weighted voxel aggregate with descriptor and inverse covariance."""

    coords: np.ndarray      # (3,)
    descriptor: np.ndarray  # (FEATURE_DIM,) unit norm
    covparams: np.ndarray   # (6,) [l1, l2, l3, d1, d2, d3]
    winv: np.ndarray        # (3, 3) SPD
    voxel: tuple
    members: np.ndarray     # (M,) point indices, kept for backprop
    weights: np.ndarray     # (M,) softmax weights, kept for backprop


@dataclass
class BackboneOutputs:
    """Forward results of both heads plus records for the backward pass."""

    scores: np.ndarray       # (N,)
    covparams: np.ndarray    # (N, 6)
    det_hidden: np.ndarray   # (N, HIDDEN_DIM) pre-activation
    cov_hidden: np.ndarray   # (N, HIDDEN_DIM) pre-activation


def subsample_voxel(cloud: PointCloud, grid: float) -> PointCloud:
    """Uniform voxel subsample: centroid, mean intensity, majority source."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot subsample an empty cloud")
    keys = np.floor(cloud.points / grid).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = cloud.points[order]
    inten = cloud.intensity[order]
    boundaries = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    counts = np.diff(np.concatenate([starts, [len(keys)]]))
    sums = np.add.reduceat(pts, starts, axis=0)
    isums = np.add.reduceat(inten, starts)
    out_pts = sums / counts[:, None]
    out_int = isums / counts
    out_src = None
    if cloud.source is not None:
        src = cloud.source[order]
        # majority = most common id among the voxel's members
        out_src = np.array([
            np.bincount(src[s:s + c]).argmax() for s, c in zip(starts, counts)
        ])
    return PointCloud(out_pts, out_int, cloud.stamp, out_src)


def compute_point_features(cloud: PointCloud, radius: float) -> np.ndarray:
    """Fixed geometric features per point, (N, FEATURE_DIM).

    Neighbourhoods come from a uniform grid of cell size ``radius``; points
    with fewer than 4 neighbours (self included) fall back to isotropic
    eigenvalue ratios and a sensor-facing radial normal.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot compute features of an empty cloud")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    pts = cloud.points
    n = pts.shape[0]
    cells = np.floor(pts / radius).astype(np.int64)

    # Sort points by cell so each cell is a contiguous run.
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    sorted_cells = cells[order]
    boundaries = np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    run_of = {}
    run_lengths = np.diff(np.concatenate([starts, [n]]))
    for s, ln in zip(starts, run_lengths):
        run_of[tuple(sorted_cells[s])] = (s, ln)

    # Accumulate neighbour moments one 3x3x3 cell offset at a time.
    counts = np.zeros(n)
    sums = np.zeros((n, 3))
    outer = np.zeros((n, 3, 3))
    r2 = radius * radius
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               for dz in (-1, 0, 1)]
    for off in offsets:
        pair_pt = []
        pair_nb = []
        for s, ln in zip(starts, run_lengths):
            key = (sorted_cells[s, 0] + off[0], sorted_cells[s, 1] + off[1],
                   sorted_cells[s, 2] + off[2])
            hit = run_of.get(key)
            if hit is None:
                continue
            s2, ln2 = hit
            pair_pt.append(np.repeat(order[s:s + ln], ln2))
            pair_nb.append(np.tile(order[s2:s2 + ln2], ln))
        if not pair_pt:
            continue
        pi = np.concatenate(pair_pt)
        ni = np.concatenate(pair_nb)
        diff = pts[ni] - pts[pi]
        mask = np.einsum("ij,ij->i", diff, diff) <= r2
        pi, ni = pi[mask], ni[mask]
        np.add.at(counts, pi, 1.0)
        np.add.at(sums, pi, pts[ni])
        np.add.at(outer, pi, pts[ni][:, :, None] * pts[ni][:, None, :])

    feats = np.zeros((n, FEATURE_DIM))
    ranges = np.linalg.norm(pts, axis=1)
    safe_counts = np.maximum(counts, 1.0)
    mean = sums / safe_counts[:, None]
    cov = outer / safe_counts[:, None, None] - mean[:, :, None] * mean[:, None, :]

    ok = counts >= 4.0
    radial = -pts / np.maximum(ranges, 1e-12)[:, None]
    feats[:, 0:3] = 1.0 / 3.0
    feats[:, 3:6] = radial
    if np.any(ok):
        evals, evecs = np.linalg.eigh(cov[ok])  # ascending
        evals = np.maximum(evals, 0.0)
        total = np.sum(evals, axis=1)
        good = total > 1e-12
        ratios = np.full_like(evals, 1.0 / 3.0)
        ratios[good] = evals[good] / total[good, None]
        feats[np.nonzero(ok)[0], 0:3] = ratios[:, ::-1]  # descending
        normals = evecs[:, :, 0]
        flip = np.einsum("ij,ij->i", normals, pts[ok]) > 0.0
        normals[flip] *= -1.0
        feats[np.nonzero(ok)[0], 3:6] = normals
    feats[:, 6] = pts[:, 2] / HEIGHT_SCALE
    feats[:, 7] = 1.0 - np.exp(-counts / DENSITY_SCALE)
    feats[:, 8] = cloud.intensity
    feats[:, 9] = ranges / RANGE_SCALE
    return feats


def unit_descriptors(feats: np.ndarray) -> np.ndarray:
    """Per-point unit descriptors (normalized feature rows)."""
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


def _leaky(a: np.ndarray) -> np.ndarray:
    return np.where(a >= 0.0, a, LEAKY_SLOPE * a)


def _leaky_grad(a: np.ndarray) -> np.ndarray:
    return np.where(a >= 0.0, 1.0, LEAKY_SLOPE)


def backbone_forward(params: ModelParams, feats: np.ndarray) -> BackboneOutputs:
    """Both heads on all points; hidden pre-activations kept for backprop."""
    det_hidden = feats @ params.det_w1.T + params.det_b1
    scores = _leaky(det_hidden) @ params.det_w2.T + params.det_b2
    cov_hidden = feats @ params.cov_w1.T + params.cov_b1
    covparams = _leaky(cov_hidden) @ params.cov_w2.T + params.cov_b2
    return BackboneOutputs(scores[:, 0], covparams, det_hidden, cov_hidden)


def _segment_softmax(scores, starts, counts):
    # Stable softmax per contiguous segment of the sorted score array.
    seg_max = np.maximum.reduceat(scores, starts)
    shifted = np.exp(scores - np.repeat(seg_max, counts))
    seg_sum = np.add.reduceat(shifted, starts)
    return shifted / np.repeat(seg_sum, counts)


def aggregate_keypoints(cloud: PointCloud, feats: np.ndarray,
                        scores: np.ndarray, covparams: np.ndarray,
                        dg: float) -> list[Keypoint]:
    """One keypoint per non-empty voxel of grid size dg.

    Coordinates, descriptor (weighted feature sum, then normalized) and the
    6 covariance parameters are all softmax-weighted sums over the voxel's
    points; the inverse covariance is composed afterward.
    """
    if dg <= 0.0:
        raise ValueError("dg must be positive")
    pts = cloud.points
    keys = np.floor(pts / dg).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    boundaries = np.any(np.diff(keys_sorted, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    counts = np.diff(np.concatenate([starts, [len(pts)]]))

    w = _segment_softmax(scores[order], starts, counts)
    coords = np.add.reduceat(w[:, None] * pts[order], starts, axis=0)
    desc_raw = np.add.reduceat(w[:, None] * feats[order], starts, axis=0)
    cp = np.add.reduceat(w[:, None] * covparams[order], starts, axis=0)

    out = []
    for j, (s, c) in enumerate(zip(starts, counts)):
        norm = np.linalg.norm(desc_raw[j])
        out.append(Keypoint(
            coords=coords[j],
            descriptor=desc_raw[j] / max(norm, 1e-12),
            covparams=cp[j],
            winv=compose_winv(cp[j]),
            voxel=tuple(keys_sorted[s]),
            members=order[s:s + c].copy(),
            weights=w[s:s + c].copy(),
        ))
    return out


def compose_winv(covparams: np.ndarray) -> np.ndarray:
    """SPD inverse covariance W = L diag(exp d) L^T from 6 unconstrained reals."""
    l1, l2, l3 = covparams[0], covparams[1], covparams[2]
    lower = np.array([[1.0, 0.0, 0.0], [l1, 1.0, 0.0], [l2, l3, 1.0]])
    return lower @ np.diag(np.exp(covparams[3:6])) @ lower.T


@dataclass
class MatchResult:
    """Soft data association of keypoints against the reference frame."""

    matched: np.ndarray  # (L, 3) weighted reference coordinates
    weights: np.ndarray  # (L, N) softmax weights, kept for backprop


def match_keypoints(keypoints: list[Keypoint], ref_descriptors: np.ndarray,
                    ref_points: np.ndarray, temperature: float) -> MatchResult:
    """Softmax match of each keypoint descriptor against all reference points.

    Logits are descriptor dot products scaled by 1/temperature.
    """
    if ref_points.shape[0] < 1:
        raise EmptyCloud("reference cloud has no points")
    desc = np.stack([k.descriptor for k in keypoints]) if keypoints else \
        np.zeros((0, FEATURE_DIM))
    logits = (desc @ ref_descriptors.T) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return MatchResult(weights @ ref_points, weights)


def sphericity(winv: np.ndarray) -> float:
    """lambda_3/lambda_1 of the covariance W^-1; 1 is isotropic, ~0 planar."""
    evals = np.linalg.eigvalsh(winv)
    return float(evals[0] / evals[-1])


def beta_metric(covparams: np.ndarray) -> float:
    """exp(d_min - d_max) over the log-diagonal; cheap anisotropy proxy."""
    d = covparams[3:6]
    return float(np.exp(np.min(d) - np.max(d)))


@dataclass
class FrameRecords:
    """Forward-pass state of one frame, retained for the backward pass."""

    points: np.ndarray                 # (N, 3) subsampled cloud
    feats: np.ndarray                  # (N, FEATURE_DIM)
    outputs: BackboneOutputs
    keypoints: list[Keypoint]
    match: MatchResult | None          # None for the reference frame
    ref_descriptors: np.ndarray | None
    ref_points: np.ndarray | None
    temperature: float = 0.0


def backbone_backward(params: ModelParams, rec: FrameRecords,
                      grad_coords: np.ndarray, grad_winv: np.ndarray,
                      grad_matched: np.ndarray) -> np.ndarray:
    """Parameter gradient from upstream gradients on z, W and r of one frame.

    Chains through the matching softmax, descriptor normalization, the LDU
    composition, the voxel aggregation softmax and both perceptron heads.
    Returns a flat vector aligned with ``ModelParams.to_vector``.

    Raises
    ------
    StaleRecords
        If the forward records are incomplete.
    """
    if rec.outputs is None or rec.keypoints is None:
        raise StaleRecords("forward records missing")
    if rec.match is None or rec.ref_descriptors is None:
        raise StaleRecords("match records missing")
    kps = rec.keypoints
    n_kp = len(kps)
    if grad_coords.shape != (n_kp, 3) or grad_winv.shape != (n_kp, 3, 3) \
            or grad_matched.shape != (n_kp, 3):
        raise StaleRecords("upstream gradient shapes do not match records")

    n_pts = rec.points.shape[0]
    grad_scores = np.zeros(n_pts)
    grad_cp_pts = np.zeros((n_pts, 6))

    if n_kp > 0:
        cp = np.stack([k.covparams for k in kps])          # (L, 6)
        lower = np.tile(np.eye(3), (n_kp, 1, 1))
        lower[:, 1, 0] = cp[:, 0]
        lower[:, 2, 0] = cp[:, 1]
        lower[:, 2, 1] = cp[:, 2]
        expd = np.exp(cp[:, 3:6])                          # (L, 3)

        # d(cost)/d(covparams) through W = L diag(exp d) L^T
        g_sym = grad_winv + np.transpose(grad_winv, (0, 2, 1))
        grad_lower = np.einsum("lij,ljk,lk->lik", g_sym, lower, expd)
        grad_cp = np.zeros((n_kp, 6))
        grad_cp[:, 0] = grad_lower[:, 1, 0]
        grad_cp[:, 1] = grad_lower[:, 2, 0]
        grad_cp[:, 2] = grad_lower[:, 2, 1]
        grad_cp[:, 3:6] = np.einsum(
            "lai,lba,lbi->li", lower, grad_winv, lower) * expd

        # matching softmax -> keypoint descriptor gradient
        v = rec.match.weights                              # (L, N_ref)
        gv = grad_matched @ rec.ref_points.T               # (L, N_ref)
        dot = np.sum(gv * v, axis=1, keepdims=True)
        grad_logits = v * (gv - dot) / rec.temperature
        grad_desc = grad_logits @ rec.ref_descriptors      # (L, F)

        # descriptor normalization: d = u/||u||
        desc = np.stack([k.descriptor for k in kps])
        raw_norm = np.array([
            np.linalg.norm(np.sum(k.weights[:, None] * rec.feats[k.members],
                                  axis=0)) for k in kps
        ])
        grad_u = (grad_desc - desc * np.sum(grad_desc * desc, axis=1,
                                            keepdims=True)) / raw_norm[:, None]

        # aggregation: z, u and covparams are weighted sums over members
        for ell, kp in enumerate(kps):
            m = kp.members
            gw = (rec.points[m] @ grad_coords[ell]
                  + rec.feats[m] @ grad_u[ell]
                  + rec.outputs.covparams[m] @ grad_cp[ell])
            grad_cp_pts[m] += kp.weights[:, None] * grad_cp[ell]
            inner = float(np.dot(gw, kp.weights))
            grad_scores[m] += kp.weights * (gw - inner)

    return _heads_backward(params, rec.feats, rec.outputs, grad_scores,
                           grad_cp_pts)


def _heads_backward(params, feats, outputs, grad_scores, grad_cp_pts):
    # Two-layer perceptron backward for both heads; flat gradient out.
    dy = grad_scores[:, None]                              # (N, 1)
    hidden = _leaky(outputs.det_hidden)
    d_det_w2 = dy.T @ hidden
    d_det_b2 = dy.sum(axis=0)
    da = (dy @ params.det_w2) * _leaky_grad(outputs.det_hidden)
    d_det_w1 = da.T @ feats
    d_det_b1 = da.sum(axis=0)

    dy = grad_cp_pts                                       # (N, 6)
    hidden = _leaky(outputs.cov_hidden)
    d_cov_w2 = dy.T @ hidden
    d_cov_b2 = dy.sum(axis=0)
    da = (dy @ params.cov_w2) * _leaky_grad(outputs.cov_hidden)
    d_cov_w1 = da.T @ feats
    d_cov_b1 = da.sum(axis=0)

    return np.concatenate([
        d_det_w1.ravel(), d_det_b1.ravel(), d_det_w2.ravel(), d_det_b2.ravel(),
        d_cov_w1.ravel(), d_cov_b1.ravel(), d_cov_w2.ravel(), d_cov_b2.ravel(),
    ])
