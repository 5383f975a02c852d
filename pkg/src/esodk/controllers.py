"""Lateral MPC controllers and the longitudinal P loop.

All three MPC variants share one SQP: body-state predictions are affine in the
steering moves (lifted Koopman dynamics or the linear bicycle model), and only
the global pose kinematics are nonlinear. Each SQP iteration linearizes the pose
rollout around the current guess and solves a dense QP in the ``Nc`` steering
moves; the torque is pinned to the longitudinal controller's value, so it never
enters the QP.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import koopman
from .eso import EsoState
from .qp import QpInfeasible, QpMaxIter, QpProblem, qp_solve
from .reference import ReferenceWindow
from .vehicle import STEER_LIMIT, TS, Pose, VehicleParams, VehicleState, cornering_stiffness


class MpcInfeasible(RuntimeError):
    pass


def p_longitudinal(Vx_r: float, Vx: float, Kp: float, T_max: float) -> float:
    if Kp <= 0:
        raise ValueError("Kp must be positive")
    return float(min(max(Kp * (Vx_r - Vx), -T_max), T_max))


@dataclass
class MpcConfig:
    Np: int = 20
    Nc: int = 5
    Q: tuple = (10.0, 10.0, 50.0)
    R: float = 1.0
    P: float = 100.0
    x_min: tuple = (0.5, -5.0, -1.5)
    x_max: tuple = (80.0, 5.0, 1.5)
    delta_min: float = -STEER_LIMIT
    delta_max: float = STEER_LIMIT
    sqp_iters: int = 5
    sqp_tol: float = 1e-4
    Ts: float = TS

    def __post_init__(self):
        self.Q = tuple(float(v) for v in np.ravel(self.Q))
        self.x_min = tuple(float(v) for v in self.x_min)
        self.x_max = tuple(float(v) for v in self.x_max)
        if not 1 <= self.Nc <= self.Np:
            raise ValueError("need 1 <= Nc <= Np")
        Q = self.Q_matrix
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if self.R <= 0 or self.P < 0:
            raise ValueError("need R > 0 and P >= 0")
        if not self.delta_min < self.delta_max:
            raise ValueError("steering bounds are inverted")
        if any(lo > hi for lo, hi in zip(self.x_min, self.x_max)):
            raise ValueError("state bounds are inverted")

    @property
    def Q_matrix(self) -> np.ndarray:
        q = np.asarray(self.Q, dtype=float)
        return np.diag(q) if q.size == 3 else q.reshape(3, 3)


@dataclass
class MpcSolution:
    delta: float                 # first move, applied to the plant
    moves: np.ndarray            # (Nc,)
    states: np.ndarray           # (Np, 3) predicted body states x_{k+1..k+Np}
    poses: np.ndarray            # (Np, 3) predicted poses eta_{k+1..k+Np}
    T: float
    objectives: list = field(default_factory=list)
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    active: list = field(default_factory=list)
    solve_time: float = 0.0
    degraded: bool = False


@dataclass
class AffinePrediction:
    """Body states ``x_{k+i} = free[i-1] + sens[i-1] @ steer`` for i = 1..Np."""

    x0: np.ndarray
    free: np.ndarray     # (Np, 3)
    sens: np.ndarray     # (Np, 3, Np), per-step steering sensitivity


def blocking_matrix(Np: int, Nc: int) -> np.ndarray:
    """Per-step steering from the Nc moves, holding the last move to the horizon end."""
    M = np.zeros((Np, Nc))
    for i in range(Np):
        M[i, min(i, Nc - 1)] = 1.0
    return M


def koopman_prediction(model, x, T: float, w, Np: int) -> AffinePrediction:
    A, B = model.A_theta, model.B_theta
    n, q = model.dims.n, model.dims.q
    z = koopman.lift(model, x)
    drift = B[:, 0] * T
    if w is not None:
        drift = drift + w
    bd = B[:, 1]
    free = np.empty((Np, n))
    sens = np.zeros((Np, n, Np))
    Sz = np.zeros((q, Np))
    for i in range(Np):
        z = A @ z + drift
        Sz = A @ Sz
        Sz[:, i] += bd
        free[i] = z[:n]
        sens[i] = Sz[:n]
    return AffinePrediction(np.asarray(x, dtype=float)[:n].copy(), free, sens)


@dataclass(frozen=True)
class BicycleModel:
    """Linear single-track model in (Vy, wr) with axle cornering stiffnesses [N/rad]."""

    m: float
    Iz: float
    lf: float
    lr: float
    Cf: float
    Cr: float

    @classmethod
    def from_params(cls, params: VehicleParams, mu: float) -> "BicycleModel":
        Fz = params.static_loads()
        Cf = 2.0 * cornering_stiffness(Fz[0], mu, params)
        Cr = 2.0 * cornering_stiffness(Fz[2], mu, params)
        return cls(params.m, params.Iz, params.lf, params.lr, Cf, Cr)

    def discrete(self, Vx: float, Ts: float):
        """Forward-Euler ``(Ad, Bd)`` at frozen longitudinal speed ``Vx``."""
        m, Iz, lf, lr, Cf, Cr = self.m, self.Iz, self.lf, self.lr, self.Cf, self.Cr
        Ac = np.array([
            [-(Cf + Cr) / (m * Vx), -Vx - (Cf * lf - Cr * lr) / (m * Vx)],
            [-(Cf * lf - Cr * lr) / (Iz * Vx), -(Cf * lf * lf + Cr * lr * lr) / (Iz * Vx)],
        ])
        Bc = np.array([Cf / m, Cf * lf / Iz])
        return np.eye(2) + Ts * Ac, Ts * Bc


def bicycle_prediction(bike: BicycleModel, x, Np: int, Ts: float) -> AffinePrediction:
    x = np.asarray(x, dtype=float)
    Vx = max(float(x[0]), 0.5)
    Ad, Bd = bike.discrete(Vx, Ts)
    s = x[1:3].copy()
    free = np.empty((Np, 3))
    sens = np.zeros((Np, 3, Np))
    Ss = np.zeros((2, Np))
    for i in range(Np):
        s = Ad @ s
        Ss = Ad @ Ss
        Ss[:, i] += Bd
        free[i] = (Vx, s[0], s[1])
        sens[i, 1:] = Ss
    return AffinePrediction(x.copy(), free, sens)


def _pose_rollout(pose0, X, Ts):
    """Poses eta_1..eta_Np from eta_0 and body states x_0..x_{Np-1}, with Jacobian pieces."""
    Np = len(X)
    eta = np.empty((Np + 1, 3))
    eta[0] = pose0
    dth = np.empty((Np, 3))
    dx = np.empty((Np, 3, 3))
    for i in range(Np):
        Vx, Vy, wr = X[i]
        th = eta[i, 2]
        c, s = math.cos(th), math.sin(th)
        eta[i + 1] = eta[i] + Ts * np.array([Vx * c - Vy * s, Vx * s + Vy * c, wr])
        dth[i] = (-Vx * s - Vy * c, Vx * c - Vy * s, 0.0)
        dx[i] = ((c, -s, 0.0), (s, c, 0.0), (0.0, 0.0, 1.0))
    return eta[1:], dth, dx


def _unwrap_to(ref_theta, theta):
    k = np.round((theta - ref_theta[0]) / (2 * math.pi))
    return ref_theta + 2 * math.pi * k


def sqp_solve(pred: AffinePrediction, pose: Pose, ref: ReferenceWindow, T: float, delta_prev: float,
              cfg: MpcConfig, seed=None) -> MpcSolution:
    Np, Nc, Ts = cfg.Np, cfg.Nc, cfg.Ts
    if len(ref) != Np:
        raise ValueError(f"reference window has {len(ref)} poses, expected Np = {Np}")
    t0 = time.perf_counter()
    Mb = blocking_matrix(Np, Nc)
    Sm = pred.sens @ Mb                           # (Np, 3, Nc)
    eta_r = ref.poses.copy()
    eta_r[:, 2] = _unwrap_to(eta_r[:, 2], pose.theta)
    eta0 = pose.as_array()
    Qb = cfg.Q_matrix

    D = np.eye(Nc) - np.eye(Nc, k=-1)
    d0 = np.zeros(Nc)
    d0[0] = delta_prev
    Hreg = 2.0 * (cfg.R * np.eye(Nc) + cfg.P * D.T @ D)
    freg = -2.0 * cfg.P * D.T @ d0

    # box and state-bound rows, dropping state rows that cannot bind inside the box
    G = [np.eye(Nc), -np.eye(Nc)]
    h = [np.full(Nc, cfg.delta_max), np.full(Nc, -cfg.delta_min)]
    reach = np.abs(Sm).sum(axis=2) * max(abs(cfg.delta_min), abs(cfg.delta_max))
    xmax, xmin = np.asarray(cfg.x_max), np.asarray(cfg.x_min)
    up = pred.free + reach >= xmax
    lo = pred.free - reach <= xmin
    if up.any():
        G.append(Sm[up])
        h.append(xmax[np.nonzero(up)[1]] - pred.free[up])
    if lo.any():
        G.append(-Sm[lo])
        h.append(pred.free[lo] - xmin[np.nonzero(lo)[1]])
    G = np.vstack(G)
    h = np.concatenate(h)

    def states_for(moves):
        X = pred.free + Sm @ moves
        return X, np.vstack([pred.x0[None], X[:-1]])

    if seed is None:
        guess = np.full(Nc, float(np.clip(delta_prev, cfg.delta_min, cfg.delta_max)))
    else:
        guess = np.clip(np.asarray(seed, dtype=float), cfg.delta_min, cfg.delta_max)
    X, Xin = states_for(guess)
    eta, dth, dxs = _pose_rollout(eta0, Xin, Ts)
    objectives, residuals, active = [], {}, []
    degraded = False
    it = 0
    for it in range(1, cfg.sqp_iters + 1):
        # Jacobian of eta_{1..Np} w.r.t. the moves
        J = np.zeros((Np, 3, Nc))
        Jcur = np.zeros((3, Nc))
        for i in range(Np):
            dxi = Sm[i - 1] if i > 0 else np.zeros((3, Nc))
            Jcur = Jcur + Ts * (np.outer(dth[i], Jcur[2]) + dxs[i] @ dxi)
            J[i] = Jcur
        Jf = J.reshape(3 * Np, Nc)
        rbar = (eta - eta_r).reshape(-1) - Jf @ guess
        Qbig = np.kron(np.eye(Np), Qb)
        JQ = Jf.T @ Qbig
        H = 2.0 * JQ @ Jf + Hreg
        H = 0.5 * (H + H.T)
        f = 2.0 * JQ @ rbar + freg
        const = float(rbar @ Qbig @ rbar + cfg.P * d0 @ d0)
        try:
            sol = qp_solve(QpProblem(H, f, G, h))
        except QpInfeasible as exc:
            if it == 1:
                raise MpcInfeasible(str(exc)) from exc
            degraded = True
            break
        except QpMaxIter:
            degraded = True
            break
        objectives.append(sol.objective + const)
        residuals, active = sol.residuals, sol.active
        new = sol.x
        X_new, Xin_new = states_for(new)
        eta_new, dth, dxs = _pose_rollout(eta0, Xin_new, Ts)
        change = float(np.max(np.abs(eta_new - eta)))
        guess, X, eta = new, X_new, eta_new
        if change < cfg.sqp_tol:
            break
    moves = np.clip(guess, cfg.delta_min, cfg.delta_max)
    return MpcSolution(float(moves[0]), moves, X, eta, T, objectives, it, residuals, active,
                       time.perf_counter() - t0, degraded)


def shifted_seed(prev: MpcSolution | None):
    if prev is None:
        return None
    return np.concatenate([prev.moves[1:], prev.moves[-1:]])


def solve_eso_dkmpc(model, est: EsoState | None, pose: Pose, x, ref: ReferenceWindow, T_fixed: float,
                    u_prev, cfg: MpcConfig, seed=None, w=None) -> MpcSolution:
    """Lifted-space MPC with the disturbance estimate held over the horizon.

    ``w`` overrides ``est.w_hat`` (the closed loop passes the freshly corrected estimate).
    """
    x = x.as_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=float)
    if w is None and est is not None:
        w = est.w_hat
    if w is not None and len(w) != model.dims.q:
        raise ValueError("disturbance estimate does not match the model's lifted dimension")
    pred = koopman_prediction(model, x, T_fixed, w, cfg.Np)
    return sqp_solve(pred, pose, ref, T_fixed, _prev_delta(u_prev), cfg, seed)


def solve_dkmpc(model, pose: Pose, x, ref: ReferenceWindow, T_fixed: float, u_prev, cfg: MpcConfig,
                seed=None) -> MpcSolution:
    return solve_eso_dkmpc(model, None, pose, x, ref, T_fixed, u_prev, cfg, seed, w=None)


def solve_lmpc(bike: BicycleModel, pose: Pose, x, ref: ReferenceWindow, T_fixed: float, u_prev,
               cfg: MpcConfig, seed=None) -> MpcSolution:
    x = x.as_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=float)
    pred = bicycle_prediction(bike, x, cfg.Np, cfg.Ts)
    return sqp_solve(pred, pose, ref, T_fixed, _prev_delta(u_prev), cfg, seed)


def _prev_delta(u_prev) -> float:
    if u_prev is None:
        return 0.0
    if hasattr(u_prev, "delta_f"):
        return float(u_prev.delta_f)
    return float(np.ravel(np.asarray(u_prev, dtype=float))[-1])
