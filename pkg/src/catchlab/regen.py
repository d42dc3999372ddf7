"""Demonstration traces -> torque-labeled robot trajectories.

Pipeline: scene-to-robot proportional mapping, joint retargeting, forward-
difference kinematics (optionally low-pass smoothed), inverse-dynamics torque
labeling with the contact force estimated from box kinematics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, filtfilt

from .dynamics import (
    BoxState,
    ExternalWrench,
    JointState,
    RobotModel,
    inverse_dynamics,
    wrist_position,
)

CONTACT_MARGIN = 0.05  # m, wrist-to-box gap below which contact is inferred


class TraceError(ValueError):
    """Trace fails validation (degenerate, empty, or malformed)."""


class DegenerateFrameError(ValueError):
    """Keypoints coincide; no angles can be extracted from this frame."""


@dataclass
class Frame:
    t: float
    shoulder: np.ndarray
    elbow: np.ndarray
    wrist: np.ndarray
    box_center: np.ndarray
    box_size: np.ndarray
    contact: bool | None = None


@dataclass
class SceneTrace:
    """Per-frame 2D keypoints and box observations at a fixed frame rate.

    Pixel coordinates use x right, y up. box_mass is carried as metadata so
    contact forces can be reconstructed (a video cannot measure it).
    """

    fps: float
    frames: list
    box_mass: float = 0.5
    source_id: str = ""

    def __post_init__(self):
        if self.fps <= 0:
            raise TraceError("fps must be positive")
        ts = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise TraceError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frames)


@dataclass
class MappingConfig:
    """Scene-to-robot rigid transform plus metric scale (m per pixel)."""

    scale: float
    rotation: float = 0.0      # rad, scene axes -> robot axes
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if self.scale <= 0:
            raise TraceError("scale must be positive")
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @property
    def rot(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])


@dataclass
class RegenConfig:
    smooth_cutoff_hz: float | None = 6.0
    max_degenerate_frac: float = 0.2
    contact_margin: float = CONTACT_MARGIN


@dataclass
class RegenStats:
    n_frames: int = 0
    n_degenerate: int = 0
    clamp_count: int = 0


@dataclass
class LabeledTrajectory:
    """Step sequence of (observation, action) with shared time step.

    obs[t] = [box_x, box_z, contact, q_prev (n), qd_prev (n), tau_prev (n)]
    act[t] = [q (n), qd (n), tau (n)]
    The previous-step fields of obs[t+1] equal act[t] by construction.
    """

    obs: np.ndarray
    act: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.act = np.asarray(self.act, dtype=np.float64)
        if len(self.obs) != len(self.act):
            raise TraceError("obs and act lengths differ")

    def __len__(self):
        return len(self.obs)

    @property
    def n_joints(self) -> int:
        return self.act.shape[1] // 3

    def validate_consistency(self, atol: float = 0.0) -> bool:
        """Check act[t] == kinematic-dynamic fields of obs[t+1]."""
        return bool(np.allclose(self.act[:-1], self.obs[1:, 3:], atol=atol, rtol=0.0))


def estimate_scale(trace: SceneTrace, model: RobotModel) -> float:
    """Metric scale from robot (upper arm + forearm) over median pixel arm length."""
    if len(trace) == 0:
        raise TraceError("empty trace")
    px = []
    for f in trace.frames:
        px.append(np.linalg.norm(f.elbow - f.shoulder) + np.linalg.norm(f.wrist - f.elbow))
    med = float(np.median(px))
    if med <= 0:
        raise TraceError("degenerate trace: zero pixel arm length")
    return float(model.lengths[0] + model.lengths[1]) / med


def map_object(p_scene, d_scene, cfg: MappingConfig):
    """Scene-frame position/dims -> robot frame: p_R = R (s p_S) + t, d_R = s d_S."""
    p = cfg.rot @ (cfg.scale * np.asarray(p_scene, dtype=np.float64)) + cfg.translation
    return p, cfg.scale * np.asarray(d_scene, dtype=np.float64)


def auto_mapping(trace: SceneTrace, model: RobotModel) -> MappingConfig:
    """Identity rotation, arm-ratio scale, translation pinning the shoulder."""
    s = estimate_scale(trace, model)
    sh = np.median([f.shoulder for f in trace.frames], axis=0)
    return MappingConfig(scale=s, rotation=0.0, translation=model.shoulder - s * sh)


def _wrap(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if a == -math.pi else a


def extract_human_angles(frame: Frame, eps: float = 1e-9) -> np.ndarray:
    """(shoulder, elbow, wrist) angles; wrist uses the box-facing hand segment."""
    upper = frame.elbow - frame.shoulder
    fore = frame.wrist - frame.elbow
    hand = frame.box_center - frame.wrist
    if (np.linalg.norm(upper) < eps or np.linalg.norm(fore) < eps
            or np.linalg.norm(hand) < eps):
        raise DegenerateFrameError(f"coincident keypoints at t={frame.t}")
    a_up = math.atan2(upper[1], upper[0])
    a_fore = math.atan2(fore[1], fore[0])
    a_hand = math.atan2(hand[1], hand[0])
    return np.array([_wrap(a_up), _wrap(a_fore - a_up), _wrap(a_hand - a_fore)])


def map_joints(q_human: np.ndarray, model: RobotModel) -> tuple[np.ndarray, int]:
    """Per-joint affine retargeting then silent clamping; returns (q, clamp count)."""
    q = model.retarget_gain * np.asarray(q_human, dtype=np.float64) + model.retarget_offset
    clamped = model.clamp_q(q)
    return clamped, int(np.sum(~np.isclose(clamped, q)))


def differentiate(q_seq: np.ndarray, dt: float,
                  smooth_cutoff_hz: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences for velocity then acceleration.

    Input has T samples; output velocity/acceleration have T-1 samples (the
    acceleration's final sample is replicated). Optional zero-phase low-pass
    smoothing of positions before differencing.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    q = np.asarray(q_seq, dtype=np.float64)
    if len(q) < 3:
        raise TraceError("need at least 3 samples to differentiate")
    if smooth_cutoff_hz is not None:
        nyq = 0.5 / dt
        b, a = butter(2, min(smooth_cutoff_hz / nyq, 0.99))
        q = filtfilt(b, a, q, axis=0)
    qd = (q[1:] - q[:-1]) / dt
    qdd = (qd[1:] - qd[:-1]) / dt
    qdd = np.concatenate([qdd, qdd[-1:]], axis=0)
    return qd, qdd


def box_distance(point: np.ndarray, center: np.ndarray, half: np.ndarray) -> float:
    """Euclidean distance from a point to an axis-aligned rectangle."""
    d = np.maximum(np.abs(point - center) - half, 0.0)
    return float(np.hypot(d[0], d[1]))


def label_torques(model: RobotModel, states: list, boxes: list,
                  contacts: np.ndarray, dt: float) -> np.ndarray:
    """Inverse-dynamics torques with F_ext = m_box (a_box + g) while in contact.

    boxes/contacts may be longer than states (trailing frames improve the
    endpoint acceleration estimate); only the first len(states) steps are
    labeled. Box acceleration uses the same forward-difference scheme as the
    joint pipeline.
    """
    S = len(states)
    if len(boxes) < S or len(contacts) < S:
        raise TraceError("boxes/contacts shorter than states")
    pos = np.array([b.pos for b in boxes])
    if len(pos) >= 3:
        _, acc = differentiate(pos, dt, smooth_cutoff_hz=None)
    else:
        acc = np.zeros_like(pos)
    taus = np.empty((S, model.n_joints))
    gvec = np.array([0.0, model.gravity])
    for t in range(S):
        st = states[t]
        if contacts[t]:
            f = boxes[t].mass * (acc[t] + gvec)
            wrench = ExternalWrench(f, wrist_position(model, st.q))
        else:
            wrench = ExternalWrench()
        taus[t] = inverse_dynamics(model, st, wrench)
    return taus


def regenerate(trace: SceneTrace, model: RobotModel,
               cfg: MappingConfig | None = None,
               regen_cfg: RegenConfig | None = None) -> tuple[LabeledTrajectory, RegenStats]:
    """Full pipeline: mapping, retargeting, differencing, torque labeling."""
    regen_cfg = regen_cfg or RegenConfig()
    if len(trace) < 3:
        raise TraceError(f"trace {trace.source_id!r}: need >= 3 frames, got {len(trace)}")
    if cfg is None:
        cfg = auto_mapping(trace, model)
    stats = RegenStats(n_frames=len(trace))

    F = len(trace)
    q_human = np.zeros((F, 3))
    good = np.ones(F, dtype=bool)
    for i, frame in enumerate(trace.frames):
        try:
            q_human[i] = extract_human_angles(frame)
        except DegenerateFrameError:
            good[i] = False
            stats.n_degenerate += 1
    if stats.n_degenerate > regen_cfg.max_degenerate_frac * F:
        raise TraceError(
            f"trace {trace.source_id!r}: {stats.n_degenerate}/{F} degenerate frames "
            f"(limit {regen_cfg.max_degenerate_frac:.0%})")
    if stats.n_degenerate:
        idx = np.arange(F)
        for j in range(3):
            q_human[~good, j] = np.interp(idx[~good], idx[good], q_human[good, j])

    q = np.zeros((F, model.n_joints))
    for i in range(F):
        q[i], nclamp = map_joints(q_human[i], model)
        stats.clamp_count += nclamp

    dt = 1.0 / trace.fps
    qd, qdd = differentiate(q, dt, regen_cfg.smooth_cutoff_hz)

    boxes_r, dims_r, contacts = [], [], np.zeros(F, dtype=bool)
    for i, frame in enumerate(trace.frames):
        p, d = map_object(frame.box_center, frame.box_size, cfg)
        half = d / 2.0
        boxes_r.append(BoxState(p, np.zeros(2), half, trace.box_mass))
        dims_r.append(d)
        if frame.contact is not None:
            contacts[i] = frame.contact
        else:
            wrist = wrist_position(model, q[i])
            contacts[i] = box_distance(wrist, p, half) < regen_cfg.contact_margin

    S = F - 1
    states = [JointState(q[t], qd[t], qdd[t]) for t in range(S)]
    taus = label_torques(model, states, boxes_r, contacts, dt)

    n = model.n_joints
    obs = np.zeros((S, 3 + 3 * n))
    act = np.zeros((S, 3 * n))
    for t in range(S):
        prev = max(t - 1, 0)
        obs[t] = np.concatenate([boxes_r[t].pos, [float(contacts[t])],
                                 q[prev], qd[prev], taus[prev]])
        act[t] = np.concatenate([q[t], qd[t], taus[t]])
    meta = {
        "source": trace.source_id,
        "robot": model.name,
        "box_mass": trace.box_mass,
        "box_dims": [float(dims_r[0][0]), float(dims_r[0][1])],
        "clamps": stats.clamp_count,
        "degenerate_frames": stats.n_degenerate,
    }
    return LabeledTrajectory(obs, act, dt, meta), stats


# -- file formats -------------------------------------------------------------

def trace_to_dict(trace: SceneTrace) -> dict:
    frames = []
    for f in trace.frames:
        rec = {
            "t": f.t,
            "shoulder": [float(f.shoulder[0]), float(f.shoulder[1])],
            "elbow": [float(f.elbow[0]), float(f.elbow[1])],
            "wrist": [float(f.wrist[0]), float(f.wrist[1])],
            "box": {"center": [float(f.box_center[0]), float(f.box_center[1])],
                    "size": [float(f.box_size[0]), float(f.box_size[1])]},
        }
        if f.contact is not None:
            rec["contact"] = bool(f.contact)
        frames.append(rec)
    return {"schema": 1, "fps": trace.fps, "box_mass": trace.box_mass, "frames": frames}


def trace_from_dict(data: dict, source_id: str = "") -> SceneTrace:
    try:
        frames = [
            Frame(
                t=float(rec["t"]),
                shoulder=np.asarray(rec["shoulder"], dtype=np.float64),
                elbow=np.asarray(rec["elbow"], dtype=np.float64),
                wrist=np.asarray(rec["wrist"], dtype=np.float64),
                box_center=np.asarray(rec["box"]["center"], dtype=np.float64),
                box_size=np.asarray(rec["box"]["size"], dtype=np.float64),
                contact=rec.get("contact"),
            )
            for rec in data["frames"]
        ]
        return SceneTrace(fps=float(data["fps"]), frames=frames,
                          box_mass=float(data.get("box_mass", 0.5)), source_id=source_id)
    except (KeyError, TypeError) as e:
        raise TraceError(f"trace {source_id!r}: malformed record: {e}") from None


def save_trace(path, trace: SceneTrace) -> None:
    Path(path).write_text(json.dumps(trace_to_dict(trace)) + "\n")


def load_trace(path) -> SceneTrace:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise TraceError(f"{path}: invalid JSON at byte {e.pos}: {e.msg}") from None
    return trace_from_dict(data, source_id=path.stem)


def trajectory_to_json(traj: LabeledTrajectory) -> str:
    # fixed field order for byte-stable files
    return json.dumps({
        "schema": 1,
        "obs": traj.obs.tolist(),
        "act": traj.act.tolist(),
        "dt": traj.dt,
        "meta": traj.meta,
    })


def trajectory_from_json(line: str) -> LabeledTrajectory:
    data = json.loads(line)
    return LabeledTrajectory(np.asarray(data["obs"]), np.asarray(data["act"]),
                             float(data["dt"]), data.get("meta", {}))


def save_dataset(path, trajectories: list) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(trajectory_to_json(traj) + "\n")


def load_dataset(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(trajectory_from_json(line))
    if not out:
        raise TraceError(f"{path}: empty dataset")
    return out
