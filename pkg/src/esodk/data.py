"""Excitation maneuvers and dataset collection from the plant."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .koopman import TrajectoryDataset
from .vehicle import (G, STEER_LIMIT, TS, ControlInput, LowSpeedError, PlantDivergence,
                      VehicleParams, VehicleState, step_dynamics)

log = logging.getLogger(__name__)

KMH = 1.0 / 3.6


@dataclass
class ExcitationSpec:
    episodes: int = 60
    duration: float = 20.0
    speed_min_kmh: float = 20.0
    speed_max_kmh: float = 80.0
    mu: float = 0.85
    steer_max: float = STEER_LIMIT
    chirp_f0: float = 0.1
    chirp_f1: float = 1.0
    lat_accel_margin: float = 1.1   # steering amplitude cap relative to the friction limit
    torque_dither: float = 150.0
    kp: float = 800.0
    p: int = 10
    stride: int = 2
    val_fraction: float = 0.2

    def __post_init__(self):
        if not (0 < self.speed_min_kmh < self.speed_max_kmh):
            raise ValueError("speed range must be positive and increasing")
        if not 0 < self.steer_max <= STEER_LIMIT:
            raise ValueError(f"steer_max must lie in (0, {STEER_LIMIT}]")
        if self.episodes < 2 or self.duration <= 0 or self.p < 2 or self.stride < 1:
            raise ValueError("invalid excitation spec")


def _steer_cap(v: float, spec: ExcitationSpec, params: VehicleParams) -> float:
    # kinematic steady-state estimate of the steering that saturates the road
    return min(spec.steer_max, spec.lat_accel_margin * spec.mu * G * params.wheelbase / max(v, 1.0) ** 2)


def _speed_profile(rng, n, spec: ExcitationSpec) -> np.ndarray:
    """Piecewise-linear target speed in m/s."""
    lo, hi = spec.speed_min_kmh * KMH, spec.speed_max_kmh * KMH
    knots_t = np.sort(rng.uniform(0, n, size=4))
    knots_t = np.concatenate([[0], knots_t, [n]])
    knots_v = rng.uniform(lo, hi, size=len(knots_t))
    return np.interp(np.arange(n), knots_t, knots_v)


def _steer_signal(rng, n, Ts) -> np.ndarray:
    """Unit-amplitude steering shape: chirp, random steps, or a mix, on +-1."""
    kind = rng.integers(3)
    t = np.arange(n) * Ts
    if kind == 0:
        f0, f1 = 0.1, 1.0
        T = t[-1] if t[-1] > 0 else 1.0
        phase = 2 * math.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / T)
        return np.sin(phase + rng.uniform(0, 2 * math.pi))
    steps = np.empty(n)
    i = 0
    while i < n:
        hold = int(rng.uniform(0.3, 2.0) / Ts)
        steps[i: i + hold] = rng.uniform(-1, 1) if rng.random() > 0.2 else 0.0
        i += hold
    if kind == 1:
        return steps
    f = rng.uniform(0.1, 1.0)
    return np.clip(0.6 * np.sin(2 * math.pi * f * t) + 0.5 * steps, -1, 1)


def simulate_episode(rng, spec: ExcitationSpec, params: VehicleParams, Ts: float = TS):
    n = int(round(spec.duration / Ts))
    v_target = _speed_profile(rng, n, spec)
    shape = _steer_signal(rng, n, Ts)
    amp_scale = rng.uniform(0.3, 1.0)
    dither = spec.torque_dither * rng.standard_normal(n)
    X = np.empty((n + 1, 3))
    U = np.empty((n, 2))
    x = VehicleState(float(v_target[0]))
    X[0] = x.as_array()
    for k in range(n):
        T = float(np.clip(spec.kp * (v_target[k] - x.Vx) + dither[k], -params.T_max, params.T_max))
        d = float(np.clip(amp_scale * shape[k] * _steer_cap(x.Vx, spec, params), -STEER_LIMIT, STEER_LIMIT))
        u = ControlInput(T, d)
        x = step_dynamics(x, u, spec.mu, params, Ts)
        X[k + 1] = x.as_array()
        U[k] = u.as_array()
    return X, U


def windows(X, U, p: int, stride: int):
    starts = range(0, len(U) - p + 1, stride)
    return (np.stack([X[s: s + p + 1] for s in starts]),
            np.stack([U[s: s + p] for s in starts]))


def collect_dataset(params: VehicleParams, spec: ExcitationSpec, seed: int = 0,
                    Ts: float = TS) -> TrajectoryDataset:
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(spec.val_fraction * spec.episodes)))
    val_episodes = set(rng.choice(spec.episodes, size=n_val, replace=False).tolist())
    xs, us, tags = [], [], []
    for ep in range(spec.episodes):
        ep_rng = np.random.default_rng([seed, ep])
        try:
            X, U = simulate_episode(ep_rng, spec, params, Ts)
        except (PlantDivergence, LowSpeedError) as exc:
            log.warning("episode %d dropped: %s", ep, exc)
            continue
        wx, wu = windows(X, U, spec.p, spec.stride)
        xs.append(wx)
        us.append(wu)
        tags.append(np.full(len(wx), ep in val_episodes))
    if not xs:
        raise PlantDivergence("every excitation episode diverged")
    return TrajectoryDataset(np.concatenate(xs), np.concatenate(us), np.concatenate(tags), Ts)


def coverage(dataset: TrajectoryDataset, spec: ExcitationSpec, bins: int = 10):
    """Histogram counts of steering over +-steer_max and speed over the speed range."""
    d = dataset.U[..., 1].ravel()
    v = dataset.X[..., 0].ravel() / KMH
    steer_counts, _ = np.histogram(d, bins=bins, range=(-spec.steer_max, spec.steer_max))
    speed_counts, _ = np.histogram(v, bins=bins, range=(spec.speed_min_kmh, spec.speed_max_kmh))
    return steer_counts, speed_counts
