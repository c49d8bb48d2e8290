"""Synthetic lidar scenario generator with exact groundtruth.

Worlds are composed of rectangles, boxes and vertical cylinders, each with
its own reflectivity.  Scans are produced by per-beam nearest-primitive
raycasting with Gaussian range noise and i.i.d. dropout; everything is
deterministic given its seed.  Groundtruth is for evaluation only, never a
training signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .errors import NonPositiveDt
from .features import PointCloud
from .trajectory import MotionPriorConfig, StateKnot

# Surface class of each primitive kind, used only for diagnostics.
LABEL_PLANAR = 0
LABEL_BOX = 1
LABEL_POLE = 2


@dataclass(frozen=True)
class Rect:
    """Finite rectangle: center, unit normal, in-plane width x height."""

    center: tuple
    normal: tuple
    width: float
    height: float
    reflectivity: float

    def axes(self):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        if abs(n[2]) < 0.9:
            u = np.cross([0.0, 0.0, 1.0], n)
        else:
            u = np.cross([1.0, 0.0, 0.0], n)
        u = u / np.linalg.norm(u)
        return n, u, np.cross(n, u)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box rotated by yaw about z."""

    center: tuple
    size: tuple
    yaw: float
    reflectivity: float


@dataclass(frozen=True)
class VerticalCylinder:
    """Cylinder with axis along +z starting at the base center."""

    base: tuple
    radius: float
    height: float
    reflectivity: float


@dataclass(frozen=True)
class WorldSpec:
    primitives: tuple
    bounds: float = 200.0

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise ValueError("world needs at least one primitive")


@dataclass(frozen=True)
class SensorSpec:
    channels: int = 24
    vertical_fov_deg: float = 30.0
    horizontal_res_deg: float = 1.5
    max_range: float = 80.0
    range_sigma: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.range_sigma < 0.0:
            raise ValueError("range_sigma must be >= 0")


def _primitive_to_json(p) -> dict:
    if isinstance(p, Rect):
        return {"type": "rect", "center": list(p.center), "normal": list(p.normal),
                "width": p.width, "height": p.height, "reflectivity": p.reflectivity}
    if isinstance(p, Box):
        return {"type": "box", "center": list(p.center), "size": list(p.size),
                "yaw": p.yaw, "reflectivity": p.reflectivity}
    if isinstance(p, VerticalCylinder):
        return {"type": "cylinder", "base": list(p.base), "radius": p.radius,
                "height": p.height, "reflectivity": p.reflectivity}
    raise TypeError(f"unknown primitive {type(p)!r}")


def _primitive_from_json(d: dict):
    kind = d.get("type")
    if kind == "rect":
        return Rect(tuple(d["center"]), tuple(d["normal"]), float(d["width"]),
                    float(d["height"]), float(d["reflectivity"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]),
                   float(d["reflectivity"]))
    if kind == "cylinder":
        return VerticalCylinder(tuple(d["base"]), float(d["radius"]),
                                float(d["height"]), float(d["reflectivity"]))
    raise ValueError(f"unknown primitive type {kind!r}")


def world_to_json(world: WorldSpec) -> dict:
    return {"bounds": world.bounds,
            "primitives": [_primitive_to_json(p) for p in world.primitives]}


def world_from_json(d: dict) -> WorldSpec:
    return WorldSpec(tuple(_primitive_from_json(p) for p in d["primitives"]),
                     float(d.get("bounds", 200.0)))


def sensor_to_json(sensor: SensorSpec) -> dict:
    return {"channels": sensor.channels,
            "vertical_fov_deg": sensor.vertical_fov_deg,
            "horizontal_res_deg": sensor.horizontal_res_deg,
            "max_range": sensor.max_range,
            "range_sigma": sensor.range_sigma,
            "dropout": sensor.dropout}


def sensor_from_json(d: dict) -> SensorSpec:
    return SensorSpec(int(d["channels"]), float(d["vertical_fov_deg"]),
                      float(d["horizontal_res_deg"]), float(d["max_range"]),
                      float(d.get("range_sigma", 0.0)), float(d.get("dropout", 0.0)))


def primitive_label(p) -> int:
    if isinstance(p, Rect):
        return LABEL_PLANAR
    if isinstance(p, Box):
        return LABEL_BOX
    return LABEL_POLE


def default_urban_block(length: float = 240.0, half_width: float = 8.0,
                        seed: int = 7) -> WorldSpec:
    """Street-canyon scene: textured ground, panelled facades, poles, boxes.

    Mixes planar, edge and cylindrical geometry so learned covariances have
    distinguishable structure.  Reflectivities vary along every surface
    (panels, ground stripes, per-pole values) so the intensity channel can
    disambiguate otherwise repetitive structure, as real facades do.
    """
    rng = np.random.default_rng(seed)
    x0 = -20.0
    prims: list = []

    # ground: stripes across x with alternating reflectivity
    stripe = 7.0
    n_stripes = int((length + 40.0) // stripe) + 1
    for i in range(n_stripes):
        cx = x0 - 20.0 + (i + 0.5) * stripe
        prims.append(Rect((cx, 0.0, 0.0), (0.0, 0.0, 1.0),
                          stripe, 6.0 * half_width,
                          reflectivity=0.12 + 0.5 * float(rng.random())))

    # facades: vertical panels with piecewise reflectivity
    panel = 9.0
    n_panels = int((length + 40.0) // panel) + 1
    for side, base in ((-1.0, 0.35), (1.0, 0.55)):
        for i in range(n_panels):
            cx = x0 - 20.0 + (i + 0.5) * panel
            prims.append(Rect((cx, side * half_width, 4.0),
                              (0.0, -side, 0.0), panel, 8.0,
                              reflectivity=base + 0.4 * float(rng.random())))
    # street ends
    prims.append(Rect((x0 - 22.0, 0.0, 4.0), (1.0, 0.0, 0.0),
                      4.0 * half_width, 8.0, reflectivity=0.3))
    prims.append(Rect((x0 + length + 22.0, 0.0, 4.0), (-1.0, 0.0, 0.0),
                      4.0 * half_width, 8.0, reflectivity=0.75))

    # poles: jittered placement, unique reflectivity and height per pole
    n_poles = max(6, int(length // 16))
    for i in range(n_poles):
        x = x0 + (i + 0.2 + 0.6 * float(rng.random())) * length / n_poles
        side = -1.0 if i % 2 == 0 else 1.0
        prims.append(VerticalCylinder(
            (x, side * (half_width - 1.2 - 0.8 * float(rng.random())), 0.0),
            radius=0.14 + 0.1 * float(rng.random()),
            height=3.5 + 2.0 * float(rng.random()),
            reflectivity=0.55 + 0.4 * i / max(n_poles - 1, 1)))

    # boxes: parked-obstacle clutter with varied pose and reflectivity
    n_boxes = max(2, int(length // 30))
    for i in range(n_boxes):
        x = x0 + (i + 0.2 + 0.5 * float(rng.random())) * length / n_boxes
        side = 1.0 if i % 2 == 0 else -1.0
        prims.append(Box(
            (x, side * (half_width - 2.0 - 1.0 * float(rng.random())), 0.7),
            (1.6 + 1.2 * float(rng.random()), 1.0 + 0.6 * float(rng.random()),
             1.2 + 0.6 * float(rng.random())),
            yaw=float(rng.uniform(0.0, 3.1)),
            reflectivity=0.15 + 0.6 * float(rng.random())))
    return WorldSpec(tuple(prims), bounds=length + 80.0)


def _beam_directions(sensor: SensorSpec) -> np.ndarray:
    half = math.radians(sensor.vertical_fov_deg) / 2.0
    if sensor.channels == 1:
        elev = np.zeros(1)
    else:
        elev = np.linspace(-half, half, sensor.channels)
    azim = np.arange(0.0, 360.0, sensor.horizontal_res_deg)
    azim = np.radians(azim)
    az, el = np.meshgrid(azim, elev)
    az, el = az.ravel(), el.ravel()
    return np.stack([np.cos(el) * np.cos(az),
                     np.cos(el) * np.sin(az),
                     np.sin(el)], axis=1)


def _intersect_rect(p: Rect, origin, dirs):
    n, u, v = p.axes()
    center = np.asarray(p.center, dtype=float)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((center - origin) @ n) / denom
        t = np.where((np.abs(denom) < 1e-12) | (t <= 1e-6), np.inf, t)
        finite = np.isfinite(t)
        local = np.where(finite[:, None], origin + t[:, None] * dirs, 0.0) - center
        inside = (np.abs(local @ u) <= p.width / 2.0) & \
                 (np.abs(local @ v) <= p.height / 2.0)
    return np.where(finite & inside, t, np.inf)


def _intersect_box(p: Box, origin, dirs):
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = (origin - np.asarray(p.center, dtype=float)) @ rot
    d = dirs @ rot
    half = np.asarray(p.size, dtype=float) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t1 = (-half - o) * inv
    t2 = (half - o) * inv
    # parallel rays: valid only if the origin lies inside the slab
    parallel = np.abs(d) < 1e-12
    lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
    hi = np.where(parallel, np.inf, np.maximum(t1, t2))
    bad = parallel & (np.abs(o) > half)
    lo = np.where(bad, np.inf, lo)
    t_near = np.max(lo, axis=1)
    t_far = np.min(hi, axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    return np.where(hit, t_near, np.inf)


def _intersect_cylinder(p: VerticalCylinder, origin, dirs):
    base = np.asarray(p.base, dtype=float)
    ox, oy = origin[0] - base[0], origin[1] - base[1]
    dx, dy = dirs[:, 0], dirs[:, 1]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - p.radius**2
    disc = b * b - 4.0 * a * c
    good = (disc >= 0.0) & (a > 1e-12)
    sq = np.sqrt(np.where(good, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > 1e-6, t0, t1)
    z = origin[2] + t * dirs[:, 2] - base[2]
    hit = good & (t > 1e-6) & (z >= 0.0) & (z <= p.height)
    return np.where(hit, t, np.inf)


def raycast_scan(world: WorldSpec, sensor: SensorSpec,
                 sensor_pose_in_world: np.ndarray, seed: int,
                 stamp: float = 0.0) -> PointCloud:
    """Single scan from the given sensor pose (sensor-to-world transform).

    Points are returned in the sensor frame with an intensity channel
    reflectivity * 1/(1 + range/50); per-point ``source`` records the index
    of the hit primitive.
    """
    dirs_sensor = _beam_directions(sensor)
    rot = sensor_pose_in_world[:3, :3]
    origin = sensor_pose_in_world[:3, 3]
    dirs_world = dirs_sensor @ rot.T

    best_t = np.full(dirs_world.shape[0], np.inf)
    best_id = np.full(dirs_world.shape[0], -1, dtype=np.int64)
    for idx, prim in enumerate(world.primitives):
        if isinstance(prim, Rect):
            t = _intersect_rect(prim, origin, dirs_world)
        elif isinstance(prim, Box):
            t = _intersect_box(prim, origin, dirs_world)
        else:
            t = _intersect_cylinder(prim, origin, dirs_world)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = idx

    hit = np.isfinite(best_t) & (best_t <= sensor.max_range)
    rng = np.random.default_rng(seed)
    ranges = best_t[hit]
    noisy = ranges + sensor.range_sigma * rng.standard_normal(ranges.shape) \
        if sensor.range_sigma > 0.0 else ranges
    refl = np.array([world.primitives[i].reflectivity for i in best_id[hit]])
    intensity = refl / (1.0 + ranges / 50.0)
    points = noisy[:, None] * dirs_sensor[hit]
    source = best_id[hit]
    if sensor.dropout > 0.0:
        keep = rng.random(points.shape[0]) >= sensor.dropout
        points, intensity, source = points[keep], intensity[keep], source[keep]
    return PointCloud(points, intensity, stamp, source)


def simulate_trajectory(qc: MotionPriorConfig, duration: float, rate: float,
                        seed: int, init_pose: np.ndarray | None = None,
                        init_velocity: np.ndarray | None = None) -> list[StateKnot]:
    """Sample the white-noise-on-acceleration prior.

    The velocity accumulates white acceleration noise with variance
    dt * qc_diag per step and the pose integrates via exp(dt * velocity).
    """
    if duration <= 0.0 or rate <= 0.0:
        raise NonPositiveDt("duration and rate must be positive")
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate
    steps = int(round(duration * rate))
    pose = np.eye(4) if init_pose is None else init_pose.copy()
    vel = np.zeros(6) if init_velocity is None else np.asarray(
        init_velocity, dtype=float).copy()
    sigma = np.sqrt(dt * qc.qc_diag)
    knots = [StateKnot(0.0, pose.copy(), vel.copy())]
    for k in range(steps):
        pose = lg.exp_se3(dt * vel) @ pose
        vel = vel + sigma * rng.standard_normal(6)
        knots.append(StateKnot((k + 1) * dt, pose.copy(), vel.copy()))
    return knots


def wobble_trajectory(duration: float, rate: float, speed: float = 8.0,
                      speed_amplitude: float = 1.5,
                      yaw_amplitude: float = 0.012,
                      ramp_time: float = 2.0) -> list[StateKnot]:
    """Deterministic gently varying forward trajectory along +x.

    Starts at rest and ramps up over ``ramp_time`` (vehicles start parked;
    this also makes the estimator's zero-motion initialization of the first
    window exact).  Built from per-step body twists of the sensor-in-world
    pose, then converted to the estimator's T_{k,0} convention (pose =
    inverse of the sensor pose, velocity negated).
    """
    if duration <= 0.0 or rate <= 0.0:
        raise NonPositiveDt("duration and rate must be positive")
    dt = 1.0 / rate
    steps = int(round(duration * rate))
    sensor_pose = np.eye(4)
    sensor_pose[2, 3] = 1.6  # sensor height above ground
    knots = []
    for k in range(steps + 1):
        t = k * dt
        ramp = min(1.0, t / ramp_time) if ramp_time > 0.0 else 1.0
        v = ramp * (speed + speed_amplitude * math.sin(0.31 * t))
        wz = ramp * yaw_amplitude * math.sin(0.17 * t)
        nu = np.array([v, 0.0, 0.0, 0.0, 0.0, wz])
        knots.append(StateKnot(t, lg.inv_pose(sensor_pose), -nu))
        sensor_pose = sensor_pose @ lg.exp_se3(dt * nu)
    return knots


def constant_twist_trajectory(duration: float, rate: float,
                              body_twist: np.ndarray,
                              start_sensor_pose: np.ndarray | None = None
                              ) -> list[StateKnot]:
    """Constant body-twist trajectory of the sensor (exact WNOA null space)."""
    if duration <= 0.0 or rate <= 0.0:
        raise NonPositiveDt("duration and rate must be positive")
    dt = 1.0 / rate
    steps = int(round(duration * rate))
    nu = np.asarray(body_twist, dtype=float)
    sensor_pose = np.eye(4) if start_sensor_pose is None else start_sensor_pose.copy()
    knots = []
    for k in range(steps + 1):
        knots.append(StateKnot(k * dt, lg.inv_pose(sensor_pose), -nu))
        sensor_pose = sensor_pose @ lg.exp_se3(dt * nu)
    return knots


def scan_sequence(world: WorldSpec, sensor: SensorSpec, knots: list[StateKnot],
                  seed: int) -> list[PointCloud]:
    """One scan per knot, taken from the sensor pose inv(T_{k,0})."""
    return [
        raycast_scan(world, sensor, lg.inv_pose(k.pose), seed + 101 * i, k.stamp)
        for i, k in enumerate(knots)
    ]
