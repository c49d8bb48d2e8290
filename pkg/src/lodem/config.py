"""Run configuration: one JSON document with explicit, dumpable defaults.

Every hyperparameter that is not fixed by the method itself lives here so a
run is fully described by (config, seed).  ``lodem inspect --defaults``
prints this document.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .learning import PipelineConfig, TrainConfig
from .simworld import SensorSpec

DEFAULTS: dict = {
    "seed": 0,
    "pipeline": {
        "subsample_grid": 0.3,
        "keypoint_grid": 1.6,
        "feature_radius": 0.6,
        "match_temperature": 0.01,
        "beta": 0.05,
        "qc_diag": [0.09, 0.0009, 0.0009, 0.0001, 0.0001, 0.01],
        "gn_tol": 1e-6,
        "gn_max_iters": 50,
    },
    "train": {
        "window": 4,
        "epochs": 12,
        "learning_rate": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "alpha": 4.0,
        "cubature": True,
        "augment": True,
        "min_rel_improvement": 1e-4,
    },
    "sensor": {
        "channels": 24,
        "vertical_fov_deg": 30.0,
        "horizontal_res_deg": 1.5,
        "max_range": 80.0,
        "range_sigma": 0.02,
        "dropout": 0.0,
    },
    "sim": {
        "world": "urban_block",
        "world_length": 240.0,
        "trajectory": "wobble",       # wobble | constant | wnoa
        "duration": 14.0,
        "rate": 10.0,
        "speed": 8.0,
    },
}

_SCHEMA = {
    "seed": int,
    "pipeline.subsample_grid": (float, lambda v: v > 0),
    "pipeline.keypoint_grid": (float, lambda v: v > 0),
    "pipeline.feature_radius": (float, lambda v: v > 0),
    "pipeline.match_temperature": (float, lambda v: v > 0),
    "pipeline.beta": (float, lambda v: 0.0 < v < 1.0),
    "pipeline.qc_diag": (list, lambda v: len(v) == 6 and all(x > 0 for x in v)),
    "pipeline.gn_tol": (float, lambda v: v > 0),
    "pipeline.gn_max_iters": (int, lambda v: v >= 1),
    "train.window": (int, lambda v: v >= 2),
    "train.epochs": (int, lambda v: v >= 1),
    "train.learning_rate": (float, lambda v: v > 0),
    "train.adam_beta1": (float, lambda v: 0.0 <= v < 1.0),
    "train.adam_beta2": (float, lambda v: 0.0 <= v < 1.0),
    "train.adam_eps": (float, lambda v: v > 0),
    "train.alpha": (float, lambda v: v > 0),
    "train.cubature": bool,
    "train.augment": bool,
    "train.min_rel_improvement": (float, lambda v: v >= 0),
    "sensor.channels": (int, lambda v: v >= 1),
    "sensor.vertical_fov_deg": (float, lambda v: v > 0),
    "sensor.horizontal_res_deg": (float, lambda v: v > 0),
    "sensor.max_range": (float, lambda v: v > 0),
    "sensor.range_sigma": (float, lambda v: v >= 0),
    "sensor.dropout": (float, lambda v: 0.0 <= v < 1.0),
    "sim.world": str,
    "sim.world_length": (float, lambda v: v > 0),
    "sim.trajectory": (str, lambda v: v in ("wobble", "constant", "wnoa")),
    "sim.duration": (float, lambda v: v > 0),
    "sim.rate": (float, lambda v: v > 0),
    "sim.speed": (float, lambda v: v > 0),
}


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def validate_config(cfg: dict) -> None:
    """Schema-check a merged config; raises ConfigError with the bad key."""
    for key, rule in _SCHEMA.items():
        try:
            value = _get(cfg, key)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"missing config key {key!r}") from exc
        expect, check = rule if isinstance(rule, tuple) else (rule, None)
        if expect is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expect) or (expect is int and isinstance(value, bool)):
            raise ConfigError(f"config key {key!r} must be {expect.__name__}")
        if check is not None and not check(value):
            raise ConfigError(f"config key {key!r} has invalid value {value!r}")


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a section")
            out[key] = _merge(out[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults merged with an optional JSON file, then validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config root must be an object")
        cfg = _merge(cfg, user)
    validate_config(cfg)
    return cfg


def dump_defaults() -> str:
    return json.dumps(DEFAULTS, indent=2, sort_keys=True)


def pipeline_config(cfg: dict) -> PipelineConfig:
    p = cfg["pipeline"]
    return PipelineConfig(
        subsample_grid=float(p["subsample_grid"]),
        keypoint_grid=float(p["keypoint_grid"]),
        feature_radius=float(p["feature_radius"]),
        match_temperature=float(p["match_temperature"]),
        beta=float(p["beta"]),
        qc_diag=tuple(float(v) for v in p["qc_diag"]),
        gn_tol=float(p["gn_tol"]),
        gn_max_iters=int(p["gn_max_iters"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        window=int(t["window"]),
        epochs=int(t["epochs"]),
        learning_rate=float(t["learning_rate"]),
        adam_beta1=float(t["adam_beta1"]),
        adam_beta2=float(t["adam_beta2"]),
        adam_eps=float(t["adam_eps"]),
        alpha=float(t["alpha"]),
        cubature=bool(t["cubature"]),
        seed=int(cfg["seed"]),
        augment=bool(t["augment"]),
        min_rel_improvement=float(t["min_rel_improvement"]),
    )


def sensor_spec(cfg: dict) -> SensorSpec:
    s = cfg["sensor"]
    return SensorSpec(
        channels=int(s["channels"]),
        vertical_fov_deg=float(s["vertical_fov_deg"]),
        horizontal_res_deg=float(s["horizontal_res_deg"]),
        max_range=float(s["max_range"]),
        range_sigma=float(s["range_sigma"]),
        dropout=float(s["dropout"]),
    )
