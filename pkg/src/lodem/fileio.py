"""File formats: velodyne binary scans, KITTI pose text, CSV artifacts and
JSON checkpoints.

Velodyne scans are little-endian float32 quadruples (x, y, z, intensity) in
meters, 16 bytes per point.  Pose files carry one pose per line as 12
floats, the row-major 3x4 top of the sensor-in-world transform.  Checkpoints
are versioned JSON holding the model parameters, Adam state and a hash of
the run configuration.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .features import ModelParams, PointCloud
from .learning import AdamState

CHECKPOINT_VERSION = 1


def read_velodyne_bin(path) -> PointCloud:
    """Read one scan; raises MalformedFile unless the size is a multiple of 16."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise MalformedFile(f"{path}: {len(raw)} bytes is not a multiple of 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3].astype(np.float64),
                      data[:, 3].astype(np.float64))


def write_velodyne_bin(path, cloud: PointCloud) -> None:
    data = np.empty((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.points
    data[:, 3] = cloud.intensity
    Path(path).write_bytes(data.tobytes())


def read_kitti_poses(path) -> list[np.ndarray]:
    """Read 4x4 poses from 12-float lines (row-major 3x4)."""
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise MalformedFile(f"{path}:{ln + 1}: expected 12 floats, got {len(vals)}")
        pose = np.eye(4)
        pose[:3, :] = np.array(vals).reshape(3, 4)
        poses.append(pose)
    return poses


def write_kitti_poses(path, poses) -> None:
    lines = [" ".join(f"{v:.12e}" for v in p[:3, :].ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_timestamps(path) -> list[float]:
    return [float(line) for line in Path(path).read_text().split()]


def write_timestamps(path, stamps) -> None:
    Path(path).write_text("\n".join(f"{s:.9f}" for s in stamps) + "\n")


def write_covariances_csv(path, covs, stamps) -> None:
    """Relative-pose covariances, one row per step: stamp then 36 row-major entries."""
    lines = ["stamp," + ",".join(f"q{i}{j}" for i in range(6) for j in range(6))]
    for s, cov in zip(stamps, covs):
        lines.append(f"{s:.9f}," + ",".join(f"{v:.12e}" for v in np.ravel(cov)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_covariances_csv(path) -> tuple[list[float], list[np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    stamps, covs = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        vals = [float(v) for v in line.split(",")]
        if len(vals) != 37:
            raise MalformedFile(f"{path}: expected 37 columns, got {len(vals)}")
        stamps.append(vals[0])
        covs.append(np.array(vals[1:]).reshape(6, 6))
    return stamps, covs


def write_loss_csv(path, report) -> None:
    lines = ["window,loss,alpha_gated,beta_gated,grad_norm"]
    for i, (loss, na, nb, gn) in enumerate(zip(
            report.window_losses, report.alpha_gated, report.beta_gated,
            report.grad_norms)):
        lines.append(f"{i},{loss:.9e},{na},{nb},{gn:.9e}")
    Path(path).write_text("\n".join(lines) + "\n")


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def save_checkpoint(path, params: ModelParams, adam: AdamState,
                    cfg_hash: str) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg_hash,
        "params": params.to_dict(),
        "adam": {"m": adam.m.tolist(), "v": adam.v.tolist(), "step": adam.step},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, AdamState, str]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise MalformedFile(f"{path}: unsupported checkpoint version")
    params = ModelParams.from_dict(doc["params"])
    adam = AdamState(np.asarray(doc["adam"]["m"], dtype=float),
                     np.asarray(doc["adam"]["v"], dtype=float),
                     int(doc["adam"]["step"]))
    return params, adam, doc.get("config_hash", "")
