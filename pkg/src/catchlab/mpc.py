"""Joint-space model-predictive tracking via a box-constrained QP.

The policy's (q, qd, tau) references are tracked under dynamics linearized
about the current state, with joint, velocity, acceleration, and torque
limits. States are eliminated by single shooting; the reduced problem is
solved by projected Newton with active-set refinement (general state-bound
rows, when present, are handled by an add/drop working-set loop).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ExternalWrench,
    JointState,
    RobotModel,
    ZERO_WRENCH,
    forward_dynamics_batch,
)


class SolverError(RuntimeError):
    """Iteration cap reached; carries the last KKT residuals."""

    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass
class LinearizedDynamics:
    """x_{k+1} = A x_k + B u_k + r, shared across the horizon."""

    A: np.ndarray
    B: np.ndarray
    r: np.ndarray
    dt: float


@dataclass
class MPCConfig:
    horizon: int = 10
    q_weight: float = 100.0
    qd_weight: float = 1.0
    u_weight: float = 1e-3
    control_dt: float = 0.01
    fd_step: float = 1e-6
    acc_low: np.ndarray | None = None   # rad/s^2; None disables acceleration rows
    acc_high: np.ndarray | None = None
    solver_tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.q_weight, self.qd_weight, self.u_weight) < 0:
            raise ValueError("weights must be nonnegative")
        if self.q_weight == 0 and self.qd_weight == 0:
            raise ValueError("q_weight and qd_weight cannot both be zero")


@dataclass
class QPProblem:
    """Tracking QP over z_k = (x_k, du_k) with du the feedforward deviation."""

    dyn: LinearizedDynamics
    x0: np.ndarray
    q_ref: np.ndarray      # (N+1, n)
    qd_ref: np.ndarray     # (N+1, n)
    u_ff: np.ndarray       # (N, n) feedforward torques
    cfg: MPCConfig
    model: RobotModel

    @property
    def n(self) -> int:
        return self.u_ff.shape[1]

    @property
    def N(self) -> int:
        return self.cfg.horizon

    def cost_blocks(self):
        """Per-step quadratic blocks (W_k, w_k) over z_k = (q, qd, du).

        Terminal block k = N has no input slice. Matches
        sum_k (q_ref-q)'Qq(q_ref-q) + (qd_ref-qd)'Qqd(qd_ref-qd) + du'Qu du.
        """
        n, N, cfg = self.n, self.N, self.cfg
        W, w = [], []
        for k in range(N + 1):
            m = 3 * n if k < N else 2 * n
            Wk = np.zeros((m, m))
            wk = np.zeros(m)
            Wk[:n, :n] = np.eye(n) * cfg.q_weight
            Wk[n:2 * n, n:2 * n] = np.eye(n) * cfg.qd_weight
            wk[:n] = -cfg.q_weight * self.q_ref[k]
            wk[n:2 * n] = -cfg.qd_weight * self.qd_ref[k]
            if k < N:
                Wk[2 * n:, 2 * n:] = np.eye(n) * cfg.u_weight
            W.append(Wk)
            w.append(wk)
        return W, w


@dataclass
class QPSolution:
    states: np.ndarray          # (N+1, 2n), includes x0
    inputs: np.ndarray          # (N, n), absolute torques
    residuals: dict
    iterations: int
    du: np.ndarray = None       # flat deviation solution (warm-start cache)


def _continuous_jacobians(model: RobotModel, x: np.ndarray, u: np.ndarray,
                          wrench: ExternalWrench, h: float):
    """Central finite differences of f(x, u) = [qd, forward_dynamics(...)].

    All perturbed configurations are evaluated in one batched dynamics call.
    """
    n = model.n_joints
    nx = 2 * n
    m = 1 + 2 * nx + 2 * n
    X = np.tile(x, (m, 1))
    U = np.tile(u, (m, 1))
    for i in range(nx):
        X[1 + 2 * i, i] += h
        X[2 + 2 * i, i] -= h
    off = 1 + 2 * nx
    for i in range(n):
        U[off + 2 * i, i] += h
        U[off + 2 * i + 1, i] -= h
    force = np.tile(wrench.force, (m, 1))
    qdd = forward_dynamics_batch(model, X[:, :n], X[:, n:], U, force)
    fvals = np.concatenate([X[:, n:], qdd], axis=1)  # f = [qd, qdd]
    f0 = fvals[0]
    fx = np.empty((nx, nx))
    for i in range(nx):
        fx[:, i] = (fvals[1 + 2 * i] - fvals[2 + 2 * i]) / (2 * h)
    fu = np.empty((nx, n))
    for i in range(n):
        fu[:, i] = (fvals[off + 2 * i] - fvals[off + 2 * i + 1]) / (2 * h)
    return f0, fx, fu


def linearize(model: RobotModel, nominal: JointState, tau: np.ndarray,
              wrench: ExternalWrench, dt: float,
              h: float = 1e-6) -> LinearizedDynamics:
    """Forward-Euler discretization about (nominal, tau).

    The nominal point is a fixed point of the affine model: A x + B u + r at
    the nominal equals one forward-Euler step of the nonlinear dynamics.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.concatenate([nominal.q, nominal.qd])
    u = np.asarray(tau, dtype=np.float64)
    f0, fx, fu = _continuous_jacobians(model, x, u, wrench, h)
    A = np.eye(len(x)) + dt * fx
    B = dt * fu
    r = dt * (f0 - fx @ x - fu @ u)
    return LinearizedDynamics(A, B, r, dt)


def build_qp(q_ref: np.ndarray, qd_ref: np.ndarray, u_ff: np.ndarray,
             dyn: LinearizedDynamics, cfg: MPCConfig, x0: np.ndarray,
             model: RobotModel) -> QPProblem:
    """Assemble the tracking QP; references must cover horizon+1 steps."""
    N = cfg.horizon
    q_ref = np.asarray(q_ref, dtype=np.float64)
    qd_ref = np.asarray(qd_ref, dtype=np.float64)
    u_ff = np.asarray(u_ff, dtype=np.float64)
    if q_ref.shape[0] != N + 1 or qd_ref.shape[0] != N + 1:
        raise ValueError(f"reference horizon {q_ref.shape[0]} != N+1 = {N + 1}")
    if u_ff.shape[0] != N:
        raise ValueError(f"feedforward horizon {u_ff.shape[0]} != N = {N}")
    return QPProblem(dyn, np.asarray(x0, dtype=np.float64), q_ref, qd_ref, u_ff,
                     cfg, model)


def solve_box_qp(H: np.ndarray, g: np.ndarray, lb: np.ndarray, ub: np.ndarray,
                 tol: float = 1e-8, max_iter: int = 200,
                 x0: np.ndarray | None = None):
    """min 1/2 x'Hx + g'x subject to lb <= x <= ub, H symmetric PD.

    Projected Newton: clamp the Newton point, then refine the free set until
    the KKT residual triple (stationarity, feasibility, complementarity) is
    below tol. Returns (x, residuals dict, iterations).
    """
    if np.any(lb > ub):
        raise ValueError("infeasible bounds: lb > ub")
    nvar = len(g)
    if x0 is not None:
        x = np.clip(x0, lb, ub)
    else:
        try:
            x = np.clip(np.linalg.solve(H, -g), lb, ub)
        except np.linalg.LinAlgError:
            x = np.clip(np.zeros(nvar), lb, ub)
    last = None
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        at_lo = x <= lb + 1e-12
        at_hi = x >= ub - 1e-12
        active = (at_lo & (grad > 0)) | (at_hi & (grad < 0))
        free = ~active
        res = _box_kkt_residuals(x, grad, lb, ub, free)
        if max(res.values()) < tol:
            return x, res, it
        last = res
        if free.any():
            Hf = H[np.ix_(free, free)]
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ x[~free])
            try:
                x_free = np.linalg.solve(Hf, rhs)
            except np.linalg.LinAlgError:
                x_free = np.linalg.lstsq(Hf, rhs, rcond=None)[0]
            x = x.copy()
            x[free] = x_free
            x = np.clip(x, lb, ub)
        else:
            break
    grad = H @ x + g
    free = ~(((x <= lb + 1e-12) & (grad > 0)) | ((x >= ub - 1e-12) & (grad < 0)))
    res = _box_kkt_residuals(x, grad, lb, ub, free)
    if max(res.values()) < tol:
        return x, res, max_iter
    raise SolverError(f"projected Newton did not converge in {max_iter} iterations",
                      residuals=res or last)


def _box_kkt_residuals(x, grad, lb, ub, free):
    viol = max(float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
    stat = float(np.max(np.abs(grad[free]), initial=0.0))
    # multipliers at active bounds are +-grad; complementarity uses the gap
    at_lo = ~free & (grad > 0)
    at_hi = ~free & (grad < 0)
    comp = 0.0
    if at_lo.any():
        comp = max(comp, float(np.max(np.abs((x[at_lo] - lb[at_lo]) * grad[at_lo]))))
    if at_hi.any():
        comp = max(comp, float(np.max(np.abs((ub[at_hi] - x[at_hi]) * grad[at_hi]))))
    return {"stationarity": stat, "feasibility": viol, "complementarity": comp}


def solve_rows_qp(H, g, C, d, tol=1e-8, max_iter=200):
    """min 1/2 x'Hx + g'x subject to C x <= d, H symmetric PD.

    Infeasible-start active-set: alternate equality-constrained KKT solves on
    the working set with multiplier-driven drops and violation-driven adds.
    Returns (x, lam, residuals, iterations).
    """
    nvar = len(g)
    work: list[int] = []
    lam_w = np.empty(0)
    x = np.linalg.solve(H, -g)
    for it in range(1, max_iter + 1):
        if work:
            Cw = C[work]
            m = len(work)
            KKT = np.block([[H, Cw.T], [Cw, np.zeros((m, m))]])
            rhs = np.concatenate([-g, d[work]])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
            x, lam_w = sol[:nvar], sol[nvar:]
            if len(lam_w) and lam_w.min() < -tol:
                work.pop(int(np.argmin(lam_w)))
                continue
        else:
            x = np.linalg.solve(H, -g)
            lam_w = np.empty(0)
        slack = C @ x - d
        worst = int(np.argmax(slack))
        if slack[worst] <= tol:
            lam = np.zeros(C.shape[0])
            lam[work] = lam_w
            return x, lam, _rows_kkt_residuals(H, g, x, C, d, lam), it
        if worst in work:
            raise SolverError("active-set cycling detected",
                              residuals=_rows_kkt_residuals(
                                  H, g, x, C, d, _full_lam(C, work, lam_w)))
        work.append(worst)
    raise SolverError(f"working-set loop did not converge in {max_iter} iterations",
                      residuals=_rows_kkt_residuals(H, g, x, C, d,
                                                    _full_lam(C, work, lam_w)))


def _full_lam(C, work, lam_w):
    lam = np.zeros(C.shape[0])
    if len(work):
        lam[work] = lam_w
    return lam


def _rows_kkt_residuals(H, g, x, C, d, lam):
    grad = H @ x + g
    slack = C @ x - d
    return {
        "stationarity": float(np.max(np.abs(grad + C.T @ lam), initial=0.0)),
        "feasibility": max(float(np.max(slack, initial=0.0)), 0.0),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def _boxes_as_rows(lb, ub, nvar):
    eye = np.eye(nvar)
    rows, rhs = [], []
    finite_hi = np.isfinite(ub)
    finite_lo = np.isfinite(lb)
    if finite_hi.any():
        rows.append(eye[finite_hi])
        rhs.append(ub[finite_hi])
    if finite_lo.any():
        rows.append(-eye[finite_lo])
        rhs.append(-lb[finite_lo])
    return rows, rhs


def _reduce_qp(qp: QPProblem):
    """Single-shooting elimination: express stacked states in du and build
    the dense reduced quadratic plus constraint rows."""
    n, N = qp.n, qp.N
    A, B, r = qp.dyn.A, qp.dyn.B, qp.dyn.r
    nx = 2 * n
    # x_k = F_k x0 + G_k du + c_k (absolute u = u_ff + du)
    F = np.empty((N, nx, nx))
    G = np.zeros((N, nx, N * n))
    c = np.zeros((N, nx))
    Ak = np.eye(nx)
    for k in range(N):
        base = A @ (c[k - 1] if k else np.zeros(nx)) + B @ qp.u_ff[k] + r
        if k:
            G[k] = A @ G[k - 1]
        G[k][:, k * n:(k + 1) * n] += B
        c[k] = base
        Ak = A @ Ak
        F[k] = Ak
    xs_base = F @ qp.x0 + c          # (N, nx): states 1..N at du = 0
    Qx = np.zeros((nx, nx))
    Qx[:n, :n] = np.eye(n) * qp.cfg.q_weight
    Qx[n:, n:] = np.eye(n) * qp.cfg.qd_weight
    xref = np.concatenate([qp.q_ref, qp.qd_ref], axis=1)  # (N+1, nx)
    H = np.kron(np.eye(N), np.eye(n) * qp.cfg.u_weight) * 2.0
    g = np.zeros(N * n)
    for k in range(N):
        Gk = G[k]
        H += 2.0 * Gk.T @ Qx @ Gk
        g += 2.0 * Gk.T @ Qx @ (xs_base[k] - xref[k + 1])
    H = 0.5 * (H + H.T)
    # torque boxes on absolute u -> shifted boxes on du
    lb = np.tile(-qp.model.tau_limit, N) - qp.u_ff.ravel()
    ub = np.tile(qp.model.tau_limit, N) - qp.u_ff.ravel()
    # state bounds and acceleration rows as general inequalities on du
    C_rows, d_rows = [], []
    q_lo, q_hi = qp.model.q_lower, qp.model.q_upper
    qd_lim = qp.model.qd_limit
    for k in range(N):
        Gq, Gqd = G[k][:n], G[k][n:]
        bq, bqd = xs_base[k][:n], xs_base[k][n:]
        C_rows += [Gq, -Gq, Gqd, -Gqd]
        d_rows += [q_hi - bq, bq - q_lo, qd_lim - bqd, bqd + qd_lim]
    if qp.cfg.acc_low is not None and qp.cfg.acc_high is not None:
        dt = qp.dyn.dt
        for k in range(N):
            Gd_next, bd_next = G[k][n:], xs_base[k][n:]
            if k == 0:
                Gd_prev = np.zeros_like(Gd_next)
                bd_prev = qp.x0[n:]
            else:
                Gd_prev, bd_prev = G[k - 1][n:], xs_base[k - 1][n:]
            Gacc = (Gd_next - Gd_prev) / dt
            bacc = (bd_next - bd_prev) / dt
            C_rows += [Gacc, -Gacc]
            d_rows += [np.asarray(qp.cfg.acc_high) - bacc,
                       bacc - np.asarray(qp.cfg.acc_low)]
    C = np.concatenate(C_rows, axis=0)
    d = np.concatenate(d_rows, axis=0)
    return H, g, lb, ub, C, d, G, xs_base


def solve_qp(qp: QPProblem, tol: float | None = None,
             warm_start: np.ndarray | None = None) -> QPSolution:
    """Solve the tracking QP; dynamics hold exactly by construction."""
    tol = tol if tol is not None else qp.cfg.solver_tol
    H, g, lb, ub, C, d, G, xs_base = _reduce_qp(qp)
    du, res, iters = solve_box_qp(H, g, lb, ub, tol, qp.cfg.max_iter, x0=warm_start)
    slack = C @ du - d
    if np.max(slack) > tol:
        # state/acceleration rows active: fold boxes in as rows and re-solve
        box_rows, box_rhs = _boxes_as_rows(lb, ub, len(g))
        C_all = np.concatenate(box_rows + [C], axis=0)
        d_all = np.concatenate(box_rhs + [d])
        du, _, res, iters = solve_rows_qp(H, g, C_all, d_all, tol, qp.cfg.max_iter)
    n, N = qp.n, qp.N
    inputs = qp.u_ff + du.reshape(N, n)
    states = np.empty((N + 1, 2 * n))
    states[0] = qp.x0
    for k in range(N):
        states[k + 1] = G[k] @ du + xs_base[k]
    return QPSolution(states, inputs, res, iters, du=du)


@dataclass
class MPCController:
    """Receding-horizon tracker with warm starts and a clamped fallback."""

    model: RobotModel
    cfg: MPCConfig = field(default_factory=MPCConfig)
    _warm: np.ndarray | None = None
    incidents: list = field(default_factory=list)

    def reset(self):
        self._warm = None

    def step(self, current: JointState, q_ref, qd_ref, u_ff,
             wrench: ExternalWrench = ZERO_WRENCH):
        """One control tick: linearize, solve, return the first torque."""
        n = self.model.n_joints
        x0 = np.concatenate([current.q, current.qd])
        dyn = linearize(self.model, current, u_ff[0], wrench, self.cfg.control_dt,
                        self.cfg.fd_step)
        qp = build_qp(q_ref, qd_ref, u_ff, dyn, self.cfg, x0, self.model)
        try:
            sol = solve_qp(qp, warm_start=self._warm)
        except SolverError as e:
            self.incidents.append({
                "time": time.time(),
                "residuals": e.residuals,
                "fallback": "clamped feedforward",
            })
            self._warm = None
            return self.model.clamp_tau(u_ff[0]), None
        du = sol.du.reshape(self.cfg.horizon, n)
        self._warm = np.concatenate([du[1:], du[-1:]]).ravel()
        return sol.inputs[0], sol


def tile_references(q_ref: np.ndarray, qd_ref: np.ndarray, tau_ref: np.ndarray,
                    horizon: int):
    """Zero-order hold: tile single-step policy references across the horizon."""
    q = np.tile(q_ref, (horizon + 1, 1))
    qd = np.tile(qd_ref, (horizon + 1, 1))
    u = np.tile(tau_ref, (horizon, 1))
    return q, qd, u
