"""Scripted compliant demonstrator and scene-trace renderer.

Stands in for human demonstration videos: ballistic interception with a
velocity-matched catch, an impact-absorbing retreat along the box's momentum,
then a settle phase. Retreat depth scales with box momentum and a per-demo
style multiplier; the settle style is either hold-low or return-to-carry.
The hand always aims at the box center, so wrist-pitch extraction from
(keypoints, box) is exact and rendered traces regenerate losslessly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dynamics import BoxState, JointState, RobotModel, wrist_position
from ..regen import Frame, MappingConfig, SceneTrace, differentiate, label_torques
from .throws import ThrowConfig, ThrowSpec, ballistic_path, reachable_crossing, sample_throw

DEMO_FPS = 100.0 / 3.0   # aligned with the 100 Hz control grid (every 3rd tick)


class DemoError(RuntimeError):
    """Could not script a feasible demonstration for this throw."""


@dataclass
class DemoStyle:
    depth_scale: float = 1.0      # multiplies the momentum-proportional retreat depth
    settle: str = "hold"          # hold | return
    catch_radius: float = 0.72    # fraction of reach at interception
    aim_low: float = 0.7          # rad, hand elevation clamp range
    aim_high: float = 1.45
    velocity_match: float = 0.85  # hand speed fraction of box speed at catch


@dataclass
class DemoConfig:
    duration: float = 1.5
    fps: float = DEMO_FPS
    momentum_to_depth: float = 1.0 / 12.0   # m per N s
    min_depth: float = 0.06
    max_depth: float = 0.30
    px_per_m: float = 260.0
    px_origin: tuple = (640.0, 360.0)
    depth_scale_range: tuple = (0.8, 1.25)
    settle_styles: tuple = ("hold", "return")
    ready_pose: tuple = (-0.45, 0.95, -0.2)
    min_flight: float = 0.15    # s, reject throws that arrive faster


@dataclass
class DemoResult:
    trace: SceneTrace
    truth: dict   # ground-truth kinematics and labels (robot frame)


def _minjerk_vel(p0, p1, v0, v1, T, t):
    """Quintic with zero end accelerations; returns position at t."""
    s = np.clip(t / T, 0.0, 1.0)
    h = p1 - p0
    # boundary conditions: x(0)=p0, x'(0)=v0, x(T)=p1, x'(T)=v1, x''=0 at ends
    c0 = p0
    c1 = v0 * T
    c2 = 0.0 * h
    c3 = 10 * h - (6 * v0 + 4 * v1) * T
    c4 = -15 * h + (8 * v0 + 7 * v1) * T
    c5 = 6 * h - (3 * v0 + 3 * v1) * T
    return c0 + c1 * s + c2 * s ** 2 + c3 * s ** 3 + c4 * s ** 4 + c5 * s ** 5


def ik_2r(model: RobotModel, target: np.ndarray, prev: np.ndarray | None = None):
    """Planar 2R inverse kinematics for the wrist joint; branch by continuity."""
    rel = target - model.shoulder
    l1, l2 = model.lengths[0], model.lengths[1]
    d2 = rel @ rel
    d = math.sqrt(d2)
    if d > (l1 + l2) * 0.999 or d < abs(l1 - l2) * 1.001:
        raise DemoError(f"wrist target out of reach: d={d:.3f}")
    cos_e = (d2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    cos_e = min(1.0, max(-1.0, cos_e))
    cands = []
    for sign in (+1.0, -1.0):
        q2 = sign * math.acos(cos_e)
        q1 = math.atan2(rel[1], rel[0]) - math.atan2(l2 * math.sin(q2),
                                                     l1 + l2 * math.cos(q2))
        if model.q_lower[0] <= q1 <= model.q_upper[0] \
                and model.q_lower[1] <= q2 <= model.q_upper[1]:
            cands.append(np.array([q1, q2]))
    if not cands:
        raise DemoError("no IK branch within joint limits")
    if prev is None:
        return max(cands, key=lambda c: c[1])  # prefer elbow-positive
    return min(cands, key=lambda c: np.abs(c - prev[:2]).max())


def _aim_angle(wrist_joint: np.ndarray, box_center: np.ndarray) -> float:
    d = box_center - wrist_joint
    return math.atan2(d[1], d[0])


def script_demo(model: RobotModel, throw: ThrowSpec, style: DemoStyle,
                cfg: DemoConfig) -> dict:
    """Script joint and box paths for one demonstration (robot frame)."""
    n_frames = int(round(cfg.duration * cfg.fps)) + 1
    dt = 1.0 / cfg.fps
    times = np.arange(n_frames) * dt
    g = model.gravity

    t_star = reachable_crossing(throw, model, g, outer=style.catch_radius)
    if t_star is None:
        raise DemoError("throw never enters the catch region")
    t_star = round(t_star / dt) * dt  # snap to the frame grid
    c_star = ballistic_path(throw, np.array([t_star]), g)[0]
    v_star = throw.release_vel + np.array([0.0, -g * t_star])

    aim = math.atan2(-v_star[1], -v_star[0]) + math.pi / 2.0
    aim = min(max(aim - math.pi / 2 + 1.1, style.aim_low), style.aim_high)
    u_hat = np.array([math.cos(aim), math.sin(aim)])
    reach_w = model.lengths[0] + model.lengths[1]
    carry_r = model.lengths[2] + 0.8 * throw.half_extents[1]
    w_star = c_star - carry_r * u_hat
    rel = np.linalg.norm(w_star - model.shoulder)
    if rel > 0.97 * reach_w or rel < 0.3 * reach_w:
        raise DemoError(f"catch pose outside comfortable workspace ({rel:.3f} m)")

    depth = style.depth_scale * cfg.momentum_to_depth * throw.mass * np.linalg.norm(v_star)
    depth = min(max(depth, cfg.min_depth), cfg.max_depth)
    tau_r = depth / max(np.linalg.norm(v_star), 1e-6)

    # keep the deepest retreat point inside the workspace
    v_unit = v_star / max(np.linalg.norm(v_star), 1e-6)
    for _ in range(8):
        deepest = w_star + depth * v_unit
        if np.linalg.norm(deepest - model.shoulder) >= 0.28 * reach_w \
                and deepest[1] > 0.25:
            break
        depth *= 0.8
        tau_r = depth / max(np.linalg.norm(v_star), 1e-6)

    w0 = wrist_position_joint(model, None, ready=True)
    q_series = np.zeros((n_frames, model.n_joints))
    box_pos = np.zeros((n_frames, 2))
    contacts = np.zeros(n_frames, dtype=bool)
    prev_q = None
    settle_t = t_star + 4.0 * tau_r
    carry_target = model.shoulder + np.array([0.55 * reach_w, -0.25 * reach_w])
    for i, t in enumerate(times):
        if t < t_star - 1e-9:
            box = ballistic_path(throw, np.array([t]), g)[0]
            w = _minjerk_vel(w0, w_star, np.zeros(2),
                             style.velocity_match * v_star, t_star, t)
            contact = False
        else:
            s = t - t_star
            box = c_star + v_star * tau_r * (1.0 - math.exp(-s / tau_r))
            if style.settle == "return" and t > settle_t:
                T_ret = max(cfg.duration - settle_t, 1e-6)
                box_settle = c_star + v_star * tau_r * (1.0 - math.exp(-(settle_t - t_star) / tau_r))
                blend = _minjerk_vel(box_settle, carry_target + carry_r * u_hat,
                                     v_star * math.exp(-(settle_t - t_star) / tau_r),
                                     np.zeros(2), T_ret, t - settle_t)
                box = blend
            w = box - carry_r * u_hat
            contact = True
        q12 = ik_2r(model, w, prev_q)
        phi12 = q12[0] + q12[1]
        q3 = _wrap_pi(_aim_angle(_fk_wrist_joint(model, q12), box) - phi12)
        if not (model.q_lower[2] <= q3 <= model.q_upper[2]):
            raise DemoError(f"wrist aim outside limits at t={t:.2f}")
        q_series[i] = np.concatenate([q12, [q3]])
        box_pos[i] = box
        contacts[i] = contact
        prev_q = q_series[i]
    return {
        "times": times,
        "q": q_series,
        "box_pos": box_pos,
        "contacts": contacts,
        "t_star": t_star,
        "style": style,
        "dt": dt,
    }


def _wrap_pi(a: float) -> float:
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if a == -math.pi else a


def _fk_wrist_joint(model: RobotModel, q12: np.ndarray) -> np.ndarray:
    l1, l2 = model.lengths[0], model.lengths[1]
    p = model.shoulder + l1 * np.array([math.cos(q12[0]), math.sin(q12[0])])
    phi = q12[0] + q12[1]
    return p + l2 * np.array([math.cos(phi), math.sin(phi)])


def wrist_position_joint(model: RobotModel, q, ready: bool = False) -> np.ndarray:
    """Wrist-joint (end of forearm) position; ready=True uses a neutral pose."""
    if ready:
        q = np.array([-0.45, 0.95, -0.2])[:model.n_joints]
    return _fk_wrist_joint(model, np.asarray(q, dtype=np.float64))


def render_trace(model: RobotModel, script: dict, throw: ThrowSpec,
                 cfg: DemoConfig, source_id: str = "") -> SceneTrace:
    """Robot-frame script -> pixel-space SceneTrace (float keypoints, y up)."""
    s = 1.0 / cfg.px_per_m
    origin = np.asarray(cfg.px_origin)
    shoulder_m = model.shoulder

    def to_px(p):
        return (np.asarray(p) - shoulder_m) / s + origin

    frames = []
    l1 = model.lengths[0]
    for i, t in enumerate(script["times"]):
        q = script["q"][i]
        elbow = shoulder_m + l1 * np.array([math.cos(q[0]), math.sin(q[0])])
        wristj = _fk_wrist_joint(model, q[:2])
        frames.append(Frame(
            t=float(t),
            shoulder=to_px(shoulder_m),
            elbow=to_px(elbow),
            wrist=to_px(wristj),
            box_center=to_px(script["box_pos"][i]),
            box_size=np.asarray(throw.half_extents) * 2.0 / s,
            contact=bool(script["contacts"][i]),
        ))
    return SceneTrace(fps=cfg.fps, frames=frames, box_mass=throw.mass,
                      source_id=source_id)


def ground_truth(model: RobotModel, script: dict, throw: ThrowSpec) -> dict:
    """Frame-grid kinematics plus torque labels via the regen labeling scheme."""
    dt = script["dt"]
    q = script["q"]
    qd, qdd = differentiate(q, dt, smooth_cutoff_hz=None)
    S = len(q) - 1
    states = [JointState(q[t], qd[t], qdd[t]) for t in range(S)]
    boxes = [BoxState(script["box_pos"][t], np.zeros(2), throw.half_extents,
                      throw.mass) for t in range(len(q))]
    taus = label_torques(model, states, boxes, script["contacts"], dt)
    return {
        "dt": dt,
        "q": q.tolist(),
        "qd": qd.tolist(),
        "tau": taus.tolist(),
        "box_pos": script["box_pos"].tolist(),
        "contacts": script["contacts"].astype(int).tolist(),
        "t_star": script["t_star"],
        "style": {"depth_scale": script["style"].depth_scale,
                  "settle": script["style"].settle},
        "throw": throw.to_dict(),
    }


def synth_demos(n: int, model: RobotModel, seed: int,
                throw_cfg: ThrowConfig | None = None,
                demo_cfg: DemoConfig | None = None) -> list:
    """Generate n demonstrations; returns a list of DemoResult."""
    if n < 1:
        raise ValueError("n must be >= 1")
    throw_cfg = throw_cfg or ThrowConfig()
    demo_cfg = demo_cfg or DemoConfig()
    out = []
    rng = np.random.default_rng(seed)
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n:
            raise DemoError("could not find enough feasible throws")
        throw = sample_throw(rng, throw_cfg)
        style = DemoStyle(
            depth_scale=rng.uniform(*demo_cfg.depth_scale_range),
            settle=demo_cfg.settle_styles[int(rng.integers(len(demo_cfg.settle_styles)))],
        )
        try:
            script = script_demo(model, throw, style, demo_cfg)
        except DemoError:
            continue
        sid = f"demo_{len(out):04d}"
        trace = render_trace(model, script, throw, demo_cfg, source_id=sid)
        out.append(DemoResult(trace=trace, truth=ground_truth(model, script, throw)))
    return out


def save_demos(demos: list, out_dir) -> list:
    """Write trace JSON + ground-truth sidecars; returns the manifest entries."""
    from ..regen import save_trace
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for demo in demos:
        sid = demo.trace.source_id
        trace_path = out_dir / f"{sid}.trace.json"
        save_trace(trace_path, demo.trace)
        truth_path = out_dir / f"{sid}.truth.json"
        truth_path.write_text(json.dumps({"schema": 1, **demo.truth}) + "\n")
        manifest.append({"id": sid, "trace": trace_path.name, "truth": truth_path.name})
    return manifest
