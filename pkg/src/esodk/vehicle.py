"""Four-wheel planar vehicle plant used as the ground truth for every experiment.

Wheel numbering: 1 front-left, 2 front-right, 3 rear-left, 4 rear-right.
Body frame has x forward, y left, yaw positive counter-clockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

G = 9.81
TS = 0.025
MIN_SPEED = 0.5
VX_BOUND = 80.0
WR_BOUND = 3.0
STEER_LIMIT = 0.3
FRICTION_EPS = 1e-6


class LowSpeedError(ValueError):
    """Slip angles are undefined near standstill."""


class PlantDivergence(RuntimeError):
    """The simulated state left the sanity envelope."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1848.0
    Iz: float = 3000.0
    lf: float = 1.2
    lr: float = 1.55
    wB: float = 1.6
    rw: float = 0.31
    B_mf: float = 10.0
    C_mf: float = 1.9
    D_mf: float = 1.0
    E_mf: float = 0.97
    T_max: float = 3000.0

    def __post_init__(self):
        for name in ("m", "Iz", "lf", "lr", "wB", "rw", "B_mf", "C_mf", "D_mf", "E_mf", "T_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"VehicleParams.{name} must be positive, got {v}")
        if self.D_mf > 1.2:
            raise ValueError("D_mf must lie in (0, 1.2]")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    def static_loads(self) -> np.ndarray:
        """Per-wheel vertical load from the static axle split (no load transfer)."""
        front = self.m * G * self.lr / (2.0 * self.wheelbase)
        rear = self.m * G * self.lf / (2.0 * self.wheelbase)
        return np.array([front, front, rear, rear])

    def with_mass(self, m: float) -> "VehicleParams":
        return VehicleParams(**{**self.__dict__, "m": m})


@dataclass(frozen=True)
class VehicleState:
    Vx: float
    Vy: float = 0.0
    wr: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.Vx, self.Vy, self.wr])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Pose:
    X: float = 0.0
    Y: float = 0.0
    theta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.theta])


@dataclass(frozen=True)
class ControlInput:
    T: float = 0.0
    delta_f: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.T, self.delta_f])

    def check(self, params: VehicleParams) -> None:
        if abs(self.delta_f) > STEER_LIMIT + 1e-12:
            raise ValueError(f"steering angle {self.delta_f} outside +-{STEER_LIMIT} rad")
        if abs(self.T) > params.T_max + 1e-9:
            raise ValueError(f"torque {self.T} outside +-{params.T_max} N*m")


@dataclass(frozen=True)
class WheelForces:
    Fx: np.ndarray = field(repr=False)
    Fy: np.ndarray = field(repr=False)
    Fz: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)


def magic_formula(alpha, Fz, mu, params: VehicleParams):
    """Pure lateral Magic Formula, odd in alpha."""
    B, C, D, E = params.B_mf, params.C_mf, params.D_mf, params.E_mf
    Ba = B * np.asarray(alpha, dtype=float)
    return mu * D * Fz * np.sin(C * np.arctan(Ba - E * (Ba - np.arctan(Ba))))


def cornering_stiffness(Fz, mu, params: VehicleParams):
    """Slope of the Magic Formula at zero slip."""
    return mu * params.D_mf * Fz * params.B_mf * params.C_mf


def sideslip_angles(state: VehicleState, delta_f: float, params: VehicleParams) -> np.ndarray:
    Vx, Vy, wr = state.Vx, state.Vy, state.wr
    if not Vx > MIN_SPEED:
        raise LowSpeedError(f"Vx = {Vx} m/s is below the {MIN_SPEED} m/s slip-angle guard")
    half = 0.5 * params.wB * wr
    vy_f = Vy + params.lf * wr
    vy_r = Vy - params.lr * wr
    return np.array([
        delta_f - math.atan2(vy_f, Vx - half),
        delta_f - math.atan2(vy_f, Vx + half),
        -math.atan2(vy_r, Vx - half),
        -math.atan2(vy_r, Vx + half),
    ])


def tire_forces(state: VehicleState, inp: ControlInput, mu: float, params: VehicleParams) -> WheelForces:
    alpha = sideslip_angles(state, inp.delta_f, params)
    Fz = params.static_loads()
    Fy = magic_formula(alpha, Fz, mu, params)
    Fx = np.full(4, inp.T / (4.0 * params.rw))
    # friction circle: scale both components jointly
    cap = mu * Fz
    mag = np.hypot(Fx, Fy)
    scale = np.ones(4)
    over = mag > cap
    scale[over] = cap[over] / mag[over]
    return WheelForces(Fx=Fx * scale, Fy=Fy * scale, Fz=Fz, alpha=alpha)


def body_forces(forces: WheelForces, delta_f: float, params: VehicleParams) -> tuple[float, float, float]:
    """Resolve wheel forces to body-frame (Fx, Fy, Mz)."""
    Fx, Fy = forces.Fx, forces.Fy
    c, s = math.cos(delta_f), math.sin(delta_f)
    # front wheels rotate with the steering angle
    fx1, fy1 = Fx[0] * c - Fy[0] * s, Fx[0] * s + Fy[0] * c
    fx2, fy2 = Fx[1] * c - Fy[1] * s, Fx[1] * s + Fy[1] * c
    fx3, fy3, fx4, fy4 = Fx[2], Fy[2], Fx[3], Fy[3]
    half = 0.5 * params.wB
    sum_x = fx1 + fx2 + fx3 + fx4
    sum_y = fy1 + fy2 + fy3 + fy4
    mz = (params.lf * (fy1 + fy2) - params.lr * (fy3 + fy4)
          + half * ((fx2 + fx4) - (fx1 + fx3)))
    return sum_x, sum_y, mz


def step_dynamics(state: VehicleState, inp: ControlInput, mu: float, params: VehicleParams,
                  Ts: float = TS) -> VehicleState:
    """One forward-Euler step of the Newton-Euler planar equations."""
    if not 0 < Ts <= 0.05:
        raise ValueError(f"Ts must lie in (0, 0.05], got {Ts}")
    inp.check(params)
    forces = tire_forces(state, inp, mu, params)
    sum_x, sum_y, mz = body_forces(forces, inp.delta_f, params)
    Vx, Vy, wr = state.Vx, state.Vy, state.wr
    nxt = VehicleState(
        Vx + Ts * (Vy * wr + sum_x / params.m),
        Vy + Ts * (-Vx * wr + sum_y / params.m),
        wr + Ts * mz / params.Iz,
    )
    if not (all(map(math.isfinite, (nxt.Vx, nxt.Vy, nxt.wr)))
            and abs(nxt.Vx) <= VX_BOUND and abs(nxt.wr) <= WR_BOUND):
        raise PlantDivergence(f"state left the sanity envelope: {nxt}")
    return nxt


def step_pose(pose: Pose, state: VehicleState, Ts: float = TS) -> Pose:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return Pose(
        pose.X + Ts * (state.Vx * c - state.Vy * s),
        pose.Y + Ts * (state.Vx * s + state.Vy * c),
        pose.theta + Ts * state.wr,
    )
