"""Planar box-catching environment: contact, integration, episode metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dynamics import (
    BoxState,
    ExternalWrench,
    JointState,
    RobotModel,
    forward_dynamics,
    jacobian,
    wrist_position,
)
from .throws import ThrowSpec, reachable_crossing


class SimulationError(RuntimeError):
    """State went non-finite; carries the last valid state."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass
class ContactParams:
    stiffness: float = 5e3        # N/m
    damping: float = 50.0         # N s/m
    friction_mu: float = 0.8
    friction_viscous: float = 250.0   # N s/m cap for the tangential force
    force_threshold: float = 0.5  # N, contact-flag gate


@dataclass
class EnvConfig:
    sim_dt: float = 1e-3
    control_dt: float = 0.01
    ready_pose: np.ndarray = field(default_factory=lambda: np.array([-0.45, 0.95, -0.2]))
    contact: ContactParams = field(default_factory=ContactParams)
    floor_z: float = 0.0
    contact_enabled: bool = True
    caught_min_contact_s: float = 0.3
    caught_max_rel_speed: float = 0.1


@dataclass
class EnvState:
    joint: JointState
    box: BoxState
    t: float = 0.0
    contact: bool = False
    energy: float = 0.0
    peak_torque: float = 0.0
    peak_force: float = 0.0
    landed: bool = False

    def copy(self) -> "EnvState":
        return EnvState(JointState(self.joint.q.copy(), self.joint.qd.copy(),
                                   self.joint.qdd.copy()),
                        self.box.copy(), self.t, self.contact, self.energy,
                        self.peak_torque, self.peak_force, self.landed)


def contact_force(wrist_pos, wrist_vel, box: BoxState, params: ContactParams):
    """Point-in-rectangle contact: spring-damper along the min-penetration axis
    plus capped Coulomb friction along the tangent. Returns force ON the box."""
    rel = wrist_pos - box.pos
    pen = box.half_extents - np.abs(rel)
    if pen[0] <= 0.0 or pen[1] <= 0.0:
        return np.zeros(2), 0.0
    axis = int(np.argmin(pen))
    sgn = -np.sign(rel[axis]) or 1.0
    normal = np.zeros(2)
    normal[axis] = sgn
    approach = (wrist_vel - box.vel) @ normal
    f_n = params.stiffness * pen[axis] + params.damping * approach
    if f_n <= 0.0:
        return np.zeros(2), 0.0
    t_axis = 1 - axis
    v_slip = box.vel[t_axis] - wrist_vel[t_axis]
    f_t = -np.sign(v_slip) * min(params.friction_mu * f_n,
                                 params.friction_viscous * abs(v_slip))
    force = np.zeros(2)
    force[axis] = sgn * f_n
    force[t_axis] = f_t
    return force, f_n


class CatchEnv:
    """Semi-implicit Euler plant with wrist-box contact and floor absorption."""

    def __init__(self, model: RobotModel, config: EnvConfig | None = None):
        self.model = model
        self.config = config or EnvConfig()
        if len(self.config.ready_pose) != model.n_joints:
            raise ValueError("ready pose length != joint count")
        if np.any(self.config.ready_pose < model.q_lower) \
                or np.any(self.config.ready_pose > model.q_upper):
            raise ValueError("ready pose violates joint limits")

    def reset(self, throw: ThrowSpec, seed: int = 0) -> EnvState:
        shoulder = self.model.shoulder
        if np.linalg.norm(throw.release_pos - shoulder) <= self.model.reach:
            raise ValueError("throw release position lies inside the arm workspace")
        q = self.model.clamp_q(np.asarray(self.config.ready_pose, dtype=np.float64))
        joint = JointState(q.copy(), np.zeros_like(q), np.zeros_like(q))
        box = BoxState(throw.release_pos.copy(), throw.release_vel.copy(),
                       throw.half_extents.copy(), throw.mass)
        return EnvState(joint, box)

    def step(self, state: EnvState, tau: np.ndarray, dt: float | None = None) -> EnvState:
        """Advance one control tick (several sim substeps) under constant tau."""
        cfgc = self.config
        dt = cfgc.control_dt if dt is None else dt
        if dt <= 0:
            raise ValueError("dt must be positive")
        n_sub = max(1, int(round(dt / cfgc.sim_dt)))
        h = dt / n_sub
        model = self.model
        tau = model.clamp_tau(np.asarray(tau, dtype=np.float64))
        st = state.copy()
        q, qd = st.joint.q, st.joint.qd
        box = st.box
        g = model.gravity
        for _ in range(n_sub):
            wrist = wrist_position(model, q)
            J = jacobian(model, q)
            wrist_vel = J @ qd
            if cfgc.contact_enabled:
                f_box, f_n = contact_force(wrist, wrist_vel, box, cfgc.contact)
            else:
                f_box, f_n = np.zeros(2), 0.0
            qdd = forward_dynamics(model, q, qd, tau, ExternalWrench(-f_box, wrist))
            qd = qd + qdd * h
            q = q + qd * h
            # hard joint stops: clamp and kill outward velocity
            below = q < model.q_lower
            above = q > model.q_upper
            if below.any() or above.any():
                q = model.clamp_q(q)
                qd = np.where(below & (qd < 0), 0.0, qd)
                qd = np.where(above & (qd > 0), 0.0, qd)
            acc_box = f_box / box.mass + np.array([0.0, -g])
            if st.landed:
                acc_box = np.zeros(2)
            vel = box.vel + acc_box * h
            pos = box.pos + vel * h
            if cfgc.contact_enabled and not st.landed \
                    and pos[1] - box.half_extents[1] <= cfgc.floor_z and vel[1] < 0:
                pos[1] = cfgc.floor_z + box.half_extents[1]
                vel = np.zeros(2)
                st.landed = True
            box = BoxState(pos, vel, box.half_extents, box.mass)
            st.energy += float(np.abs(tau @ qd)) * h
            st.peak_force = max(st.peak_force, f_n)
            st.t += h
        st.joint = JointState(q, qd, qdd)
        st.box = box
        st.contact = f_n > cfgc.contact.force_threshold
        st.peak_torque = max(st.peak_torque, float(np.max(np.abs(tau))))
        if not (np.isfinite(q).all() and np.isfinite(qd).all()
                and np.isfinite(box.pos).all()):
            raise SimulationError("simulation state went non-finite", state=state)
        return st


@dataclass
class StepRecord:
    """One control tick of an episode log (shared schema with the replay log)."""

    t: float
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    box_pos: np.ndarray
    box_vel: np.ndarray
    contact: bool
    normal_force: float


def is_caught(records: list, env_cfg: EnvConfig, model: RobotModel) -> bool:
    """Catch = trailing sustained contact, near-zero relative speed, box airborne."""
    if not records:
        return False
    last = records[-1]
    # trailing contiguous contact duration
    t_contact = 0.0
    for rec in reversed(records):
        if not rec.contact:
            break
        t_contact = last.t - rec.t
    if t_contact + 1e-9 < env_cfg.caught_min_contact_s:
        return False
    wrist_vel = jacobian(model, last.q) @ last.qd
    rel_speed = float(np.linalg.norm(last.box_vel - wrist_vel))
    if rel_speed >= env_cfg.caught_max_rel_speed:
        return False
    return bool(last.box_pos[1] - 1e-6 > env_cfg.floor_z)


def energy(records: list, dt: float) -> float:
    """Mechanical work magnitude from a step log: sum |tau . qd| dt."""
    return float(sum(abs(rec.tau @ rec.qd) * dt for rec in records))
