"""Closed-loop scenario runs, traces and tracking metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import controllers as ctl
from . import koopman
from .eso import EsoGains, EsoState, disturbance_update, eso_step
from .reference import DlcGeometry, ReferencePath, gen_dlc_reference, reference_window
from .vehicle import (TS, ControlInput, LowSpeedError, PlantDivergence, Pose, VehicleParams,
                      VehicleState, step_dynamics, step_pose)

log = logging.getLogger(__name__)

KMH = 1.0 / 3.6
TRACE_COLUMNS = ("t", "X", "Y", "theta", "Vx", "Vy", "wr", "T", "delta_f", "Xr", "Yr", "theta_r",
                 "eY", "dphi", "w_norm", "solve_ms")
METRICS_COLUMNS = ("controller", "eY_max", "eY_avg", "eY_rmse", "dphi_max", "dphi_avg", "dphi_rmse",
                   "solve_ms_avg", "diverged")
CONTROLLERS = ("lmpc", "dkmpc", "eso-dkmpc")
DEPARTURE_LIMIT = 5.0   # |e_Y| beyond this counts as leaving the course


@dataclass
class Scenario:
    name: str
    mu: float
    speed_knots: tuple            # ((t [s], V_xr [km/h]), ...), piecewise-linear
    duration: float
    initial_speed_kmh: float
    mass: float | None = None
    geometry: DlcGeometry = field(default_factory=DlcGeometry)
    mirror: bool = False
    Ts: float = TS

    def __post_init__(self):
        if not 0 < self.mu <= 1.2:
            raise ValueError("mu must lie in (0, 1.2]")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        self.speed_knots = tuple((float(t), float(v)) for t, v in self.speed_knots)

    @property
    def steps(self) -> int:
        return math.ceil(self.duration / self.Ts - 1e-9)

    def speed_ref(self, t: float) -> float:
        ts, vs = zip(*self.speed_knots)
        return float(np.interp(t, ts, vs)) * KMH

    def path(self) -> ReferencePath:
        p = gen_dlc_reference(self.geometry)
        return p.mirrored() if self.mirror else p


SCENARIOS = {
    "dlc_highmu": Scenario("dlc_highmu", 0.85, ((0.0, 35.0),), 13.5, 35.0),
    "dlc_lowmu": Scenario("dlc_lowmu", 0.5, ((0.0, 45.0), (9.5, 55.0)), 9.5, 50.0),
}


@dataclass
class RunTrace:
    controller: str
    scenario: str
    data: np.ndarray              # (steps, len(TRACE_COLUMNS))
    diverged: bool = False
    degraded_steps: int = 0
    message: str = ""

    def column(self, name: str) -> np.ndarray:
        return self.data[:, TRACE_COLUMNS.index(name)]

    def __len__(self):
        return len(self.data)

    def to_csv(self, path=None, timing=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.data:
            vals = [repr(float(v)) for v in row]
            if not timing:
                vals[-1] = "0.0"
            w.writerow(vals)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


class LmpcController:
    name = "lmpc"

    def __init__(self, bike: ctl.BicycleModel, cfg: ctl.MpcConfig):
        self.bike, self.cfg = bike, cfg
        self.prev = None

    def command(self, x, pose, window, T, delta_prev):
        t0 = time.perf_counter()
        sol = ctl.solve_lmpc(self.bike, pose, x, window, T, delta_prev, self.cfg, ctl.shifted_seed(self.prev))
        self.prev = sol
        return sol, 0.0, time.perf_counter() - t0


class DkmpcController:
    name = "dkmpc"

    def __init__(self, model, cfg: ctl.MpcConfig):
        self.model, self.cfg = model, cfg
        self.prev = None

    def command(self, x, pose, window, T, delta_prev):
        t0 = time.perf_counter()
        sol = ctl.solve_dkmpc(self.model, pose, x, window, T, delta_prev, self.cfg, ctl.shifted_seed(self.prev))
        self.prev = sol
        return sol, 0.0, time.perf_counter() - t0


class EsoDkmpcController:
    """Lift, correct the disturbance estimate, solve, then advance the observer."""

    name = "eso-dkmpc"

    def __init__(self, model, gains: EsoGains, cfg: ctl.MpcConfig):
        self.model, self.gains, self.cfg = model, gains, cfg
        self.prev = None
        self.est: EsoState | None = None

    def command(self, x, pose, window, T, delta_prev):
        t0 = time.perf_counter()
        z = koopman.lift(self.model, x)
        if self.est is None:
            self.est = EsoState.start(z)
        w = disturbance_update(self.gains, self.est, z)
        sol = ctl.solve_eso_dkmpc(self.model, self.est, pose, x, window, T, delta_prev, self.cfg,
                                  ctl.shifted_seed(self.prev), w=w)
        self.est = eso_step(self.model, self.gains, self.est, z, np.array([T, sol.delta]))
        self.prev = sol
        return sol, float(np.linalg.norm(w)), time.perf_counter() - t0


@dataclass
class LoopConfig:
    Kp: float = 800.0
    noise_std: tuple | None = None     # additive Gaussian on measured (Vx, Vy, wr), off by default
    seed: int = 0
    lateral_disturbance: float = 0.0   # constant unmodelled lateral acceleration on the plant [m/s^2]


def run_closed_loop(scenario: Scenario, controller, params: VehicleParams | None = None,
                    loop: LoopConfig | None = None) -> RunTrace:
    params = params or VehicleParams()
    if scenario.mass is not None:
        params = params.with_mass(scenario.mass)
    loop = loop or LoopConfig()
    rng = np.random.default_rng(loop.seed)
    path = scenario.path()
    cfg = controller.cfg
    x = VehicleState(scenario.initial_speed_kmh * KMH)
    pose = Pose()
    delta_prev = 0.0
    rows = []
    diverged, message, degraded = False, "", 0
    for k in range(scenario.steps):
        t = k * scenario.Ts
        Vxr = scenario.speed_ref(t)
        xm = x.as_array()
        if loop.noise_std is not None:
            xm = xm + rng.standard_normal(3) * np.asarray(loop.noise_std)
        T = ctl.p_longitudinal(Vxr, float(xm[0]), loop.Kp, params.T_max)
        window = reference_window(path, pose.X, pose.Y, max(float(xm[0]), 0.5), Vxr, cfg.Np, cfg.Ts)
        try:
            sol, w_norm, dt = controller.command(xm, pose, window, T, delta_prev)
        except ctl.MpcInfeasible as exc:
            diverged, message = True, f"step {k}: MPC infeasible ({exc})"
            break
        degraded += sol.degraded
        delta = sol.delta
        eY, _, th_r, Xr, Yr = path.project(pose.X, pose.Y)
        th_r += 2 * math.pi * round((pose.theta - th_r) / (2 * math.pi))
        dphi = pose.theta - th_r
        rows.append((t, pose.X, pose.Y, pose.theta, x.Vx, x.Vy, x.wr, T, delta, Xr, Yr, th_r,
                     eY, dphi, w_norm, 1e3 * dt))
        if abs(eY) > DEPARTURE_LIMIT:
            diverged, message = True, f"step {k}: left the course (e_Y = {eY:.2f} m)"
            break
        try:
            x_next = step_dynamics(x, ControlInput(T, delta), scenario.mu, params, scenario.Ts)
            if loop.lateral_disturbance:
                x_next = replace(x_next, Vy=x_next.Vy + scenario.Ts * loop.lateral_disturbance)
        except (PlantDivergence, LowSpeedError) as exc:
            diverged, message = True, f"step {k}: {exc}"
            break
        pose = step_pose(pose, x, scenario.Ts)
        x = x_next
        delta_prev = delta
    if message:
        log.warning("%s on %s: %s", controller.name, scenario.name, message)
    data = np.array(rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))
    return RunTrace(controller.name, scenario.name, data, diverged, degraded, message)


@dataclass
class Metrics:
    controller: str
    eY: tuple          # Max, Avg, RMSE of |e_Y|
    dphi: tuple        # Max, Avg, RMSE of |dphi|
    solve_ms_avg: float
    diverged: bool = False

    def row(self, timing=True):
        return [self.controller, *(repr(float(v)) for v in self.eY), *(repr(float(v)) for v in self.dphi),
                repr(float(self.solve_ms_avg)) if timing else "0.0", str(int(self.diverged))]


def _stats(v) -> tuple:
    a = np.abs(np.asarray(v, dtype=float))
    return float(a.max()), float(a.mean()), float(math.sqrt(np.mean(a * a)))


def compute_metrics(trace: RunTrace) -> Metrics:
    if len(trace) == 0:
        raise ValueError("empty trace")
    return Metrics(trace.controller, _stats(trace.column("eY")), _stats(trace.column("dphi")),
                   float(np.mean(trace.column("solve_ms"))), trace.diverged)


def metrics_csv(rows, path=None, timing=True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for m in rows:
        w.writerow(m.row(timing))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def make_controller(kind: str, cfg: ctl.MpcConfig, model=None, gains: EsoGains | None = None,
                    bike: ctl.BicycleModel | None = None):
    if kind == "lmpc":
        if bike is None:
            raise ValueError("lmpc needs a bicycle model")
        return LmpcController(bike, cfg)
    if kind == "dkmpc":
        if model is None:
            raise ValueError("dkmpc needs a Koopman model")
        return DkmpcController(model, cfg)
    if kind == "eso-dkmpc":
        if model is None or gains is None:
            raise ValueError("eso-dkmpc needs a Koopman model and observer gains")
        return EsoDkmpcController(model, gains, cfg)
    raise ValueError(f"unknown controller {kind!r}; choose from {', '.join(CONTROLLERS)}")


@dataclass
class CompareResult:
    traces: list
    metrics: list


def compare(scenario: Scenario, kinds, cfg: ctl.MpcConfig, model=None, gains=None, bike=None,
            params: VehicleParams | None = None, loop: LoopConfig | None = None) -> CompareResult:
    kinds = list(kinds)
    for k in kinds:
        if k not in CONTROLLERS:
            raise ValueError(f"unknown controller {k!r}; choose from {', '.join(CONTROLLERS)}")
    traces, rows = [], []
    for k in kinds:
        c = make_controller(k, cfg, model, gains, bike)
        tr = run_closed_loop(scenario, c, params, loop)
        traces.append(tr)
        rows.append(compute_metrics(tr) if len(tr) else Metrics(k, (math.nan,) * 3, (math.nan,) * 3,
                                                                 math.nan, True))
    return CompareResult(traces, rows)


def mirrored(scenario: Scenario) -> Scenario:
    return replace(scenario, mirror=not scenario.mirror)
