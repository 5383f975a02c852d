"""Discrete extended state observer on the lifted state.

With linear correction terms the observer is::

    z_hat+ = A z_hat + B u + w_hat - beta1 (z_hat - z)
    w_hat+ = w_hat - beta2 (z_hat - z)

and, for a constant true disturbance, the errors ``(z_hat - z, w_hat - w)`` evolve
under ``[[A - beta1 I, I], [-beta2 I, I]]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EsoInfeasible(ValueError):
    def __init__(self, msg, best_rho):
        super().__init__(msg)
        self.best_rho = best_rho


def _matrix(model_or_A) -> np.ndarray:
    A = getattr(model_or_A, "A_theta", model_or_A)
    return np.atleast_2d(np.asarray(A, dtype=float))


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def error_matrix(model_or_A, beta1: float, beta2: float) -> np.ndarray:
    A = _matrix(model_or_A)
    q = A.shape[0]
    I = np.eye(q)
    return np.block([[A - beta1 * I, I], [-beta2 * I, I]])


@dataclass(frozen=True)
class EsoGains:
    beta1: float
    beta2: float
    rho: float | None = None

    @classmethod
    def checked(cls, model_or_A, beta1: float, beta2: float) -> "EsoGains":
        """Gains validated against the convergence condition rho(Theta) < 1."""
        rho = spectral_radius(error_matrix(model_or_A, beta1, beta2))
        if not rho < 1.0:
            raise ValueError(f"gains ({beta1}, {beta2}) give rho(Theta) = {rho:.6f} >= 1")
        return cls(float(beta1), float(beta2), rho)


@dataclass
class EsoState:
    z_hat: np.ndarray
    w_hat: np.ndarray

    @classmethod
    def start(cls, z_meas) -> "EsoState":
        z = np.array(z_meas, dtype=float)
        return cls(z, np.zeros_like(z))


def eso_step(model, gains: EsoGains, est: EsoState, z_meas, u) -> EsoState:
    A, B = model.A_theta, model.B_theta
    u = u.as_array() if hasattr(u, "as_array") else np.asarray(u, dtype=float)
    e = est.z_hat - np.asarray(z_meas, dtype=float)
    z_next = A @ est.z_hat + B @ u + est.w_hat - gains.beta1 * e
    w_next = est.w_hat - gains.beta2 * e
    return EsoState(z_next, w_next)


def disturbance_update(gains: EsoGains, est: EsoState, z_meas) -> np.ndarray:
    """The ``w_hat`` that :func:`eso_step` will produce; it does not depend on ``u``."""
    return est.w_hat - gains.beta2 * (est.z_hat - np.asarray(z_meas, dtype=float))


def _grid_radius(eigs, b1, b2) -> np.ndarray:
    """rho(Theta) on a gain grid from the eigenvalues of A.

    The blocks of Theta commute, so its eigenvalues solve
    ``mu^2 - (lam - b1 + 1) mu + (lam - b1 + b2) = 0`` for each eigenvalue ``lam``.
    """
    lam = eigs[None, None, :]
    tr = lam - b1[..., None] + 1.0
    det = lam - b1[..., None] + b2[..., None]
    disc = np.sqrt(tr * tr - 4.0 * det + 0j)
    r = np.maximum(np.abs(0.5 * (tr + disc)), np.abs(0.5 * (tr - disc)))
    return r.max(axis=-1)


def design_gains(model_or_A, target_rho: float, beta1_max=2.0, beta2_max=1.0,
                 resolution=0.01) -> EsoGains:
    """Smallest grid gains with rho(Theta) <= target_rho.

    Among feasible grid points the one with the smallest ``beta1 + beta2`` wins
    (ties: smaller ``beta1``). Raises :class:`EsoInfeasible` with the best radius
    on the grid when nothing meets the target.
    """
    if not 0.0 < target_rho < 1.0:
        raise ValueError("target_rho must lie in (0, 1)")
    A = _matrix(model_or_A)
    eigs = np.linalg.eigvals(A)
    b1 = np.round(np.arange(0.0, beta1_max + 0.5 * resolution, resolution), 10)
    b2 = np.round(np.arange(0.0, beta2_max + 0.5 * resolution, resolution), 10)
    B1, B2 = np.meshgrid(b1, b2, indexing="ij")
    rho = _grid_radius(eigs, B1, B2)
    ok = rho <= target_rho
    if not ok.any():
        best = float(rho.min())
        raise EsoInfeasible(f"no gains on the grid reach rho <= {target_rho}; best {best:.6f}", best)
    score = np.where(ok, B1 + B2, np.inf)
    i, j = np.unravel_index(np.lexsort((B1.ravel(), score.ravel()))[0], B1.shape)
    gains = EsoGains.checked(A, float(B1[i, j]), float(B2[i, j]))
    if gains.rho > target_rho + 1e-9:
        raise EsoInfeasible(f"grid estimate disagrees with the eigen solver (rho {gains.rho})", gains.rho)
    return gains
