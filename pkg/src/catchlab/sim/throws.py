"""Throw specifications and the synthetic throw distribution."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dynamics import RobotModel

# planar (x-extent, z-extent) in meters and mass in kg
BOX_PROFILES = {
    "box_a": {"dims": (0.66, 0.14), "mass": 0.453},
    "box_b": {"dims": (0.61, 0.305), "mass": 0.777},
    "box_c": {"dims": (0.671, 0.23), "mass": 0.660},
}


@dataclass
class ThrowSpec:
    release_pos: np.ndarray     # m
    release_vel: np.ndarray     # m/s, directed toward the arm
    box_profile: str = "box_a"
    mass: float | None = None
    half_extents: np.ndarray | None = None

    def __post_init__(self):
        self.release_pos = np.asarray(self.release_pos, dtype=np.float64)
        self.release_vel = np.asarray(self.release_vel, dtype=np.float64)
        prof = BOX_PROFILES.get(self.box_profile)
        if self.mass is None:
            if prof is None:
                raise ValueError(f"unknown box profile {self.box_profile!r}")
            self.mass = prof["mass"]
        if self.half_extents is None:
            if prof is None:
                raise ValueError(f"unknown box profile {self.box_profile!r}")
            self.half_extents = np.array(prof["dims"]) / 2.0
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "release_pos": self.release_pos.tolist(),
            "release_vel": self.release_vel.tolist(),
            "box_profile": self.box_profile,
            "mass": self.mass,
            "half_extents": self.half_extents.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThrowSpec":
        return cls(d["release_pos"], d["release_vel"], d.get("box_profile", "box_a"),
                   d.get("mass"), np.asarray(d["half_extents"]) if "half_extents" in d
                   else None)


@dataclass
class ThrowConfig:
    """Uniform ranges for the synthetic thrower (config-exposed)."""

    speed: tuple = (2.0, 4.0)           # m/s
    angle_deg: tuple = (-10.0, 20.0)    # above horizontal
    height: tuple = (1.2, 1.6)          # m
    release_x: tuple = (1.4, 1.9)       # m in front of the base
    box_profile: str = "box_a"


def sample_throw(rng: np.random.Generator, cfg: ThrowConfig) -> ThrowSpec:
    speed = rng.uniform(*cfg.speed)
    ang = math.radians(rng.uniform(*cfg.angle_deg))
    x = rng.uniform(*cfg.release_x)
    z = rng.uniform(*cfg.height)
    vel = np.array([-speed * math.cos(ang), speed * math.sin(ang)])
    return ThrowSpec(np.array([x, z]), vel, cfg.box_profile)


def sample_throws(n: int, seed: int, cfg: ThrowConfig | None = None) -> list:
    cfg = cfg or ThrowConfig()
    rng = np.random.default_rng(seed)
    return [sample_throw(rng, cfg) for _ in range(n)]


def ballistic_path(spec: ThrowSpec, t: np.ndarray, gravity: float = 9.81):
    """Closed-form free flight from release."""
    t = np.asarray(t, dtype=np.float64)
    x = spec.release_pos[0] + spec.release_vel[0] * t
    z = spec.release_pos[1] + spec.release_vel[1] * t - 0.5 * gravity * t * t
    return np.stack([x, z], axis=-1)


def reachable_crossing(spec: ThrowSpec, model: RobotModel, gravity: float = 9.81,
                       inner: float = 0.35, outer: float = 0.93,
                       z_floor_margin: float = 0.25) -> float | None:
    """First time the ballistic path enters the annular catch region, or None."""
    ts = np.arange(0.0, 1.2, 1e-3)
    path = ballistic_path(spec, ts, gravity)
    rel = path - model.shoulder
    dist = np.hypot(rel[:, 0], rel[:, 1])
    ok = (dist <= outer * model.reach) & (dist >= inner * model.reach) \
        & (path[:, 1] > z_floor_margin) & (path[:, 0] > 0.05)
    idx = np.argmax(ok)
    if not ok[idx]:
        return None
    return float(ts[idx])


def save_throws(path, throws: list) -> None:
    Path(path).write_text(json.dumps(
        {"schema": 1, "throws": [t.to_dict() for t in throws]}) + "\n")


def load_throws(path) -> list:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):  # bare-list form
        records = data
    else:
        records = data["throws"]
    return [ThrowSpec.from_dict(r) for r in records]
