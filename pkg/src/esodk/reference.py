"""Reference paths: double-lane-change geometry and polyline queries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DlcGeometry:
    """Entry straight, lane change out, offset plateau, lane change back, exit straight [m]."""

    sections: tuple = (15.0, 30.0, 25.0, 25.0, 15.0)
    offset: float = 3.5
    run_out: float = 80.0
    spacing: float = 0.05

    def __post_init__(self):
        if len(self.sections) != 5 or any(s <= 0 for s in self.sections):
            raise ValueError("DLC needs five positive section lengths")
        if self.spacing <= 0 or self.run_out < 0:
            raise ValueError("invalid DLC sampling")

    @property
    def breakpoints(self) -> np.ndarray:
        return np.cumsum((0.0,) + tuple(self.sections))

    def max_curvature_bound(self) -> float:
        """Upper bound on |d theta / dX| from the half-cosine blends."""
        s_out, s_back = self.sections[1], self.sections[3]
        return 0.5 * self.offset * (math.pi / min(s_out, s_back)) ** 2


def dlc_lateral(X, g: DlcGeometry):
    """Return ``(Y, dY/dX)`` of the DLC centre line at abscissae ``X``."""
    X = np.asarray(X, dtype=float)
    b = g.breakpoints
    h = g.offset
    Y = np.zeros_like(X)
    dY = np.zeros_like(X)
    out = (X >= b[1]) & (X < b[2])
    ph = math.pi * (X[out] - b[1]) / g.sections[1]
    Y[out] = 0.5 * h * (1.0 - np.cos(ph))
    dY[out] = 0.5 * h * math.pi / g.sections[1] * np.sin(ph)
    plateau = (X >= b[2]) & (X < b[3])
    Y[plateau] = h
    back = (X >= b[3]) & (X < b[4])
    ph = math.pi * (X[back] - b[3]) / g.sections[3]
    Y[back] = 0.5 * h * (1.0 + np.cos(ph))
    dY[back] = -0.5 * h * math.pi / g.sections[3] * np.sin(ph)
    return Y, dY


@dataclass
class ReferencePath:
    X: np.ndarray
    Y: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        seg = np.hypot(np.diff(self.X), np.diff(self.Y))
        if np.any(seg <= 0):
            raise ValueError("reference path has repeated points")
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    def __len__(self):
        return len(self.X)

    def mirrored(self) -> "ReferencePath":
        return ReferencePath(self.X, -self.Y, -self.theta)

    def project(self, X: float, Y: float):
        """Nearest point on the polyline.

        Returns ``(e_Y, s, theta_r, X_r, Y_r)`` with ``e_Y`` positive when the
        point lies left of the path direction.
        """
        x0, y0 = self.X[:-1], self.Y[:-1]
        dx, dy = np.diff(self.X), np.diff(self.Y)
        L2 = dx * dx + dy * dy
        t = np.clip(((X - x0) * dx + (Y - y0) * dy) / L2, 0.0, 1.0)
        px, py = x0 + t * dx, y0 + t * dy
        d2 = (X - px) ** 2 + (Y - py) ** 2
        i = int(np.argmin(d2))
        seg_len = math.sqrt(L2[i])
        cross = (dx[i] * (Y - py[i]) - dy[i] * (X - px[i])) / seg_len
        th = self.theta[i] + t[i] * (self.theta[i + 1] - self.theta[i])
        return cross, self.s[i] + t[i] * seg_len, th, px[i], py[i]

    def sample(self, s_query) -> np.ndarray:
        """Interpolated ``(X, Y, theta)`` rows at arc lengths ``s_query``."""
        s_query = np.clip(np.asarray(s_query, dtype=float), 0.0, self.s[-1])
        return np.stack([np.interp(s_query, self.s, self.X),
                         np.interp(s_query, self.s, self.Y),
                         np.interp(s_query, self.s, self.theta)], axis=-1)


def gen_dlc_reference(g: DlcGeometry | None = None) -> ReferencePath:
    g = g or DlcGeometry()
    length = g.breakpoints[-1] + g.run_out
    X = np.arange(0.0, length + 0.5 * g.spacing, g.spacing)
    Y, dY = dlc_lateral(X, g)
    return ReferencePath(X, Y, np.arctan2(dY, np.ones_like(dY)))


def straight_reference(length: float = 400.0, spacing: float = 0.05, heading: float = 0.0) -> ReferencePath:
    s = np.arange(0.0, length + 0.5 * spacing, spacing)
    return ReferencePath(s * math.cos(heading), s * math.sin(heading), np.full_like(s, heading))


@dataclass
class ReferenceWindow:
    """``N_p`` reference poses ahead of the vehicle plus the target speed."""

    poses: np.ndarray      # (N_p, 3) X_r, Y_r, theta_r
    Vx_r: float

    def __post_init__(self):
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=float))
        if self.poses.shape[1] != 3:
            raise ValueError("reference poses must be (N_p, 3)")
        if len(self.poses) > 1 and np.max(np.abs(np.diff(self.poses[:, 2]))) > 1.0:
            raise ValueError("reference heading is not unwrapped")

    def __len__(self):
        return len(self.poses)


def reference_window(path: ReferencePath, X: float, Y: float, speed: float, Vx_r: float,
                     n: int, Ts: float) -> ReferenceWindow:
    """Poses spaced by the distance travelled per sample at ``speed``."""
    _, s0, _, _, _ = path.project(X, Y)
    s = s0 + speed * Ts * np.arange(1, n + 1)
    return ReferenceWindow(path.sample(s), Vx_r)
