"""Robot profile files: line-oriented key-value text, one file per robot.

Two profiles ship with the package, mirroring the two lab arms' sagittal-plane
link coordinates and pitch-joint limits; out-of-plane joints are omitted
(held at fixed angles).
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from . import config
from .dynamics import RobotModel

_REQUIRED_LINK = ("mass", "length", "com", "inertia")
_REQUIRED_JOINT = ("limit.lower", "limit.upper", "velocity", "torque")


def load_profile(path) -> RobotModel:
    entries = config.load(path)
    return profile_from_entries(entries, default_name=Path(path).stem)


def profile_from_entries(entries: dict, default_name: str = "robot") -> RobotModel:
    links = config.indexed_groups(entries, "link")
    joints = config.indexed_groups(entries, "joint")
    if not links:
        raise config.ConfigError("profile has no link.* entries")
    if len(joints) != len(links):
        raise config.ConfigError(f"{len(links)} links but {len(joints)} joints")
    for i, link in enumerate(links, start=1):
        for key in _REQUIRED_LINK:
            if key not in link:
                raise config.ConfigError(f"link.{i}.{key} missing")
    for i, joint in enumerate(joints, start=1):
        for key in _REQUIRED_JOINT:
            if key not in joint:
                raise config.ConfigError(f"joint.{i}.{key} missing")
    return RobotModel(
        name=str(entries.get("name", default_name)),
        masses=[l["mass"] for l in links],
        lengths=[l["length"] for l in links],
        coms=[l["com"] for l in links],
        inertias=[l["inertia"] for l in links],
        q_lower=[j["limit.lower"] for j in joints],
        q_upper=[j["limit.upper"] for j in joints],
        qd_limit=[j["velocity"] for j in joints],
        tau_limit=[j["torque"] for j in joints],
        gravity=float(entries.get("gravity", 9.81)),
        base_height=float(entries.get("base.height", 0.0)),
        retarget_gain=[j.get("gain", 1.0) for j in joints],
        retarget_offset=[j.get("offset", 0.0) for j in joints],
        active=np.array([bool(j.get("active", True)) for j in joints]),
    )


def save_profile(path, model: RobotModel) -> None:
    entries = {"name": model.name, "gravity": model.gravity, "base.height": model.base_height}
    for i in range(model.n_joints):
        k = i + 1
        entries[f"link.{k}.mass"] = float(model.masses[i])
        entries[f"link.{k}.length"] = float(model.lengths[i])
        entries[f"link.{k}.com"] = float(model.coms[i])
        entries[f"link.{k}.inertia"] = float(model.inertias[i])
        entries[f"joint.{k}.limit.lower"] = float(model.q_lower[i])
        entries[f"joint.{k}.limit.upper"] = float(model.q_upper[i])
        entries[f"joint.{k}.velocity"] = float(model.qd_limit[i])
        entries[f"joint.{k}.torque"] = float(model.tau_limit[i])
        entries[f"joint.{k}.gain"] = float(model.retarget_gain[i])
        entries[f"joint.{k}.offset"] = float(model.retarget_offset[i])
        entries[f"joint.{k}.active"] = bool(model.active[i])
    config.dump(path, entries)


def builtin_profile(name: str) -> RobotModel:
    """Shipped profiles: 'robot_a' (large arm) or 'robot_b' (small arm)."""
    ref = resources.files("catchlab.data").joinpath(f"{name}.profile")
    if not ref.is_file():
        raise FileNotFoundError(f"no builtin profile {name!r}")
    return profile_from_entries(config.loads(ref.read_text()), default_name=name)


def resolve_profile(spec: str) -> RobotModel:
    """Accept a builtin profile name or a path to a profile file."""
    path = Path(spec)
    if path.is_file():
        return load_profile(path)
    try:
        return builtin_profile(spec)
    except FileNotFoundError:
        raise FileNotFoundError(f"robot profile {spec!r}: not a file and not a builtin") from None
