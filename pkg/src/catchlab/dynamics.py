"""Planar (sagittal x-z) serial-arm rigid-body dynamics, n <= 3 revolute joints.

Angles are measured counterclockwise from the +x axis, gravity along -z.
All operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

_CSTEP = 1e-200  # complex-step size; exact dM/dq to machine precision


class ModelConfigError(ValueError):
    """Robot model violates a physical invariant."""


@dataclass
class RobotModel:
    """Link chain parameters plus joint limits and retargeting map."""

    name: str
    masses: np.ndarray        # kg
    lengths: np.ndarray       # m
    coms: np.ndarray          # m, offset of center of mass along the link
    inertias: np.ndarray      # kg m^2 about the com
    q_lower: np.ndarray       # rad
    q_upper: np.ndarray       # rad
    qd_limit: np.ndarray      # rad/s
    tau_limit: np.ndarray     # N m
    gravity: float = 9.81
    base_height: float = 0.0  # m, shoulder height above the floor
    retarget_gain: np.ndarray = None
    retarget_offset: np.ndarray = None
    active: np.ndarray = None

    def __post_init__(self):
        for name in ("masses", "lengths", "coms", "inertias", "q_lower", "q_upper",
                     "qd_limit", "tau_limit"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.n_joints
        if self.retarget_gain is None:
            self.retarget_gain = np.ones(n)
        if self.retarget_offset is None:
            self.retarget_offset = np.zeros(n)
        if self.active is None:
            self.active = np.ones(n, dtype=bool)
        self.retarget_gain = np.asarray(self.retarget_gain, dtype=np.float64)
        self.retarget_offset = np.asarray(self.retarget_offset, dtype=np.float64)
        if np.any(self.masses <= 0) or np.any(self.lengths <= 0):
            raise ModelConfigError(f"{self.name}: masses and lengths must be positive")
        if np.any(self.coms < 0) or np.any(self.coms > self.lengths):
            raise ModelConfigError(f"{self.name}: com offsets must lie within [0, length]")
        if np.any(self.inertias < 0):
            raise ModelConfigError(f"{self.name}: inertias must be nonnegative")
        if np.any(self.q_lower >= self.q_upper):
            raise ModelConfigError(f"{self.name}: joint limits need lower < upper")

    @property
    def n_joints(self) -> int:
        return len(self.masses)

    @property
    def reach(self) -> float:
        return float(self.lengths.sum())

    @property
    def shoulder(self) -> np.ndarray:
        return np.array([0.0, self.base_height])

    def clamp_q(self, q):
        return np.clip(q, self.q_lower, self.q_upper)

    def clamp_tau(self, tau):
        return np.clip(tau, -self.tau_limit, self.tau_limit)


@dataclass
class JointState:
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qd = np.asarray(self.qd, dtype=np.float64)
        self.qdd = np.asarray(self.qdd, dtype=np.float64)


@dataclass
class BoxState:
    pos: np.ndarray           # center, m, (x, z)
    vel: np.ndarray           # m/s
    half_extents: np.ndarray  # m
    mass: float               # kg
    contact: bool = False

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.vel = np.asarray(self.vel, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise ModelConfigError("box half-extents must be positive")
        if self.mass <= 0:
            raise ModelConfigError("box mass must be positive")

    def copy(self) -> "BoxState":
        return BoxState(self.pos.copy(), self.vel.copy(), self.half_extents.copy(),
                        self.mass, self.contact)


@dataclass
class ExternalWrench:
    force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    point: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=np.float64)
        self.point = np.asarray(self.point, dtype=np.float64)


ZERO_WRENCH = ExternalWrench()


def _perp(v):
    """90-degree CCW rotation in the x-z plane: lever arm -> velocity direction."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def _frames(model: RobotModel, q):
    """Joint positions (n+1, 2) including the tip, and link com positions (n, 2)."""
    phi = np.cumsum(q)
    u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    n = model.n_joints
    joints = np.zeros((n + 1, 2), dtype=u.dtype)
    joints[0, 1] = model.base_height
    for i in range(n):
        joints[i + 1] = joints[i] + model.lengths[i] * u[i]
    coms = joints[:-1] + model.coms[:, None] * u
    return joints, coms


def wrist_position(model: RobotModel, q) -> np.ndarray:
    return _frames(model, q)[0][-1]


def jacobian(model: RobotModel, q) -> np.ndarray:
    """2 x n map from joint rates to wrist-point planar velocity."""
    joints, _ = _frames(model, q)
    tip = joints[-1]
    return _perp(tip[None, :] - joints[:-1]).T.copy()


def inertia_matrix(model: RobotModel, q) -> np.ndarray:
    """Composite rigid-body M(q); symmetric positive-definite."""
    q = np.asarray(q)
    n = model.n_joints
    joints, coms = _frames(model, q)
    M = np.zeros((n, n), dtype=q.dtype if np.iscomplexobj(q) else np.float64)
    for i in range(n):
        jv = np.zeros((2, n), dtype=M.dtype)
        lever = _perp(coms[i][None, :] - joints[:i + 1])
        jv[:, :i + 1] = lever.T
        M += model.masses[i] * (jv.T @ jv)
        M[:i + 1, :i + 1] += model.inertias[i]
    return M


def _dM_dq(model: RobotModel, q) -> np.ndarray:
    """dM[i, j, k] = dM_ij/dq_k by complex-step differentiation."""
    n = model.n_joints
    out = np.empty((n, n, n))
    for k in range(n):
        qc = q.astype(complex)
        qc[k] += 1j * _CSTEP
        out[:, :, k] = inertia_matrix(model, qc).imag / _CSTEP
    return out


def coriolis_matrix(model: RobotModel, q, qd) -> np.ndarray:
    """Christoffel-symbol C(q, qd); makes dM/dt - 2C skew-symmetric."""
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    dM = _dM_dq(model, q)
    return 0.5 * (dM @ qd + np.einsum("ikj,k->ij", dM, qd) - np.einsum("jki,k->ij", dM, qd))


def gravity_vector(model: RobotModel, q) -> np.ndarray:
    """G(q) = d(potential energy)/dq."""
    q = np.asarray(q, dtype=np.float64)
    n = model.n_joints
    joints, coms = _frames(model, q)
    G = np.zeros(n)
    for i in range(n):
        # dV/dq_j = m_i g * d(com_z)/dq_j; d(com)/dq_j = perp(com - joint_j)
        lever = _perp(coms[i][None, :] - joints[:i + 1])
        G[:i + 1] += model.masses[i] * model.gravity * lever[:, 1]
    return G


def inverse_dynamics(model: RobotModel, state: JointState,
                     wrench: ExternalWrench = ZERO_WRENCH) -> np.ndarray:
    """tau = M qdd + C qd + G + J^T F_ext (F_ext = force the arm exerts)."""
    M = inertia_matrix(model, state.q)
    C = coriolis_matrix(model, state.q, state.qd)
    G = gravity_vector(model, state.q)
    J = jacobian(model, state.q)
    return M @ state.qdd + C @ state.qd + G + J.T @ wrench.force


def forward_dynamics(model: RobotModel, q, qd, tau,
                     wrench: ExternalWrench = ZERO_WRENCH) -> np.ndarray:
    """qdd = M^-1 (tau - C qd - G - J^T F_ext); M inverted by Cholesky."""
    M = inertia_matrix(model, q)
    C = coriolis_matrix(model, q, qd)
    G = gravity_vector(model, q)
    J = jacobian(model, q)
    rhs = np.asarray(tau, dtype=np.float64) - C @ qd - G - J.T @ wrench.force
    try:
        factor = cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise ModelConfigError(f"{model.name}: inertia matrix not positive-definite: {e}") from None
    return cho_solve(factor, rhs, check_finite=False)


def semi_implicit_step(model: RobotModel, q, qd, tau, wrench, dt):
    """One symplectic-Euler step of the arm: velocity first, then position."""
    qdd = forward_dynamics(model, q, qd, tau, wrench)
    qd2 = qd + qdd * dt
    return q + qd2 * dt, qd2, qdd


def total_energy(model: RobotModel, q, qd) -> float:
    """Kinetic + gravitational potential energy of the arm."""
    M = inertia_matrix(model, q)
    _, coms = _frames(model, np.asarray(q, dtype=np.float64))
    return float(0.5 * qd @ M @ qd + np.sum(model.masses * model.gravity * coms[:, 1]))


def _frames_batch(model: RobotModel, q):
    """Batched joint/com positions: q (m, n) -> joints (m, n+1, 2), coms (m, n, 2)."""
    phi = np.cumsum(q, axis=-1)
    u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)  # (m, n, 2)
    m, n = q.shape
    joints = np.zeros((m, n + 1, 2), dtype=u.dtype)
    joints[:, 0, 1] = model.base_height
    for i in range(n):
        joints[:, i + 1] = joints[:, i] + model.lengths[i] * u[:, i]
    coms = joints[:, :-1] + model.coms[None, :, None] * u
    return joints, coms


def _inertia_batch(model: RobotModel, q):
    """Batched M(q): q (m, n) -> (m, n, n)."""
    m, n = q.shape
    joints, coms = _frames_batch(model, q)
    M = np.zeros((m, n, n), dtype=joints.dtype)
    for i in range(n):
        lever = _perp(coms[:, i, None, :] - joints[:, :i + 1, :])  # (m, i+1, 2)
        jv = np.zeros((m, 2, n), dtype=joints.dtype)
        jv[:, :, :i + 1] = np.swapaxes(lever, -1, -2)
        M += model.masses[i] * np.swapaxes(jv, -1, -2) @ jv
        M[:, :i + 1, :i + 1] += model.inertias[i]
    return M


def forward_dynamics_batch(model: RobotModel, q, qd, tau, force=None) -> np.ndarray:
    """Vectorized forward dynamics over a batch of configurations.

    q/qd/tau: (m, n); force: optional (m, 2) wrist force. Returns qdd (m, n).
    Matches forward_dynamics row by row (same complex-step Coriolis path).
    """
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    m, n = q.shape
    M = _inertia_batch(model, q)
    dM = np.empty((m, n, n, n))
    for k in range(n):
        qc = q.astype(complex)
        qc[:, k] += 1j * _CSTEP
        dM[..., k] = _inertia_batch(model, qc).imag / _CSTEP
    C = 0.5 * (np.einsum("mijk,mk->mij", dM, qd)
               + np.einsum("mikj,mk->mij", dM, qd)
               - np.einsum("mjki,mk->mij", dM, qd))
    joints, coms = _frames_batch(model, q)
    G = np.zeros((m, n))
    for i in range(n):
        lever = _perp(coms[:, i, None, :] - joints[:, :i + 1, :])
        G[:, :i + 1] += model.masses[i] * model.gravity * lever[..., 1]
    rhs = tau - np.einsum("mij,mj->mi", C, qd) - G
    if force is not None:
        tip = joints[:, -1]
        J = np.swapaxes(_perp(tip[:, None, :] - joints[:, :-1]), -1, -2)  # (m, 2, n)
        rhs -= np.einsum("mji,mj->mi", J, np.asarray(force, dtype=np.float64))
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise ModelConfigError(f"{model.name}: inertia matrix not positive-definite: {e}") \
            from None


def ballistic_step(box: BoxState, dt: float, gravity: float = 9.81) -> BoxState:
    """Free flight by semi-implicit Euler; requires the box not in contact."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if box.contact:
        raise ValueError("ballistic_step requires a contact-free box")
    vel = box.vel.copy()
    vel[1] -= gravity * dt
    return BoxState(box.pos + vel * dt, vel, box.half_extents, box.mass, False)
