"""Dense strictly convex QP solver (dual active set, Goldfarb-Idnani style).

Solves ``min 0.5 x'Hx + f'x  s.t.  G x <= h,  Aeq x = beq``. Problems here have
at most a few dozen variables, so factorizations are recomputed each iteration
instead of being updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class QpInfeasible(RuntimeError):
    pass


class QpMaxIter(RuntimeError):
    pass


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.atleast_1d(np.asarray(self.f, dtype=float))
        n = len(self.f)
        if self.H.shape != (n, n):
            raise ValueError("H must be n x n")
        if not np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12):
            raise ValueError("H must be symmetric")
        self.G = np.zeros((0, n)) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=float))
        self.h = np.zeros(0) if self.h is None else np.atleast_1d(np.asarray(self.h, dtype=float))
        self.Aeq = np.zeros((0, n)) if self.Aeq is None else np.atleast_2d(np.asarray(self.Aeq, dtype=float))
        self.beq = np.zeros(0) if self.beq is None else np.atleast_1d(np.asarray(self.beq, dtype=float))
        if self.G.shape != (len(self.h), n) or self.Aeq.shape != (len(self.beq), n):
            raise ValueError("constraint shapes do not match")

    @property
    def n(self) -> int:
        return len(self.f)

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    lam: np.ndarray            # inequality multipliers (>= 0)
    nu: np.ndarray             # equality multipliers
    objective: float
    iterations: int
    active: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)


def kkt_residuals(prob: QpProblem, x, lam, nu) -> dict:
    grad = prob.H @ x + prob.f + prob.G.T @ lam + prob.Aeq.T @ nu
    slack = prob.G @ x - prob.h
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal": float(max(np.max(slack, initial=0.0), np.max(np.abs(prob.Aeq @ x - prob.beq), initial=0.0))),
        "dual": float(max(0.0, -np.min(lam, initial=0.0))),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def qp_solve(prob: QpProblem, tol: float = 1e-10, max_iter: int = 500) -> QpSolution:
    H, f = prob.H, prob.f
    n = prob.n
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be positive definite") from exc
    Linv = np.linalg.solve(L, np.eye(n))
    Hinv = Linv.T @ Linv

    # all constraints as rows n_i' x >= b_i
    N_all = np.vstack([prob.Aeq, -prob.G])
    b_all = np.concatenate([prob.beq, -prob.h])
    meq = len(prob.beq)
    scale = np.maximum(np.linalg.norm(N_all, axis=1), 1e-300)

    x = -Hinv @ f
    active: list[int] = []
    u = np.zeros(0)
    sign = np.ones(len(b_all))   # equality rows may be flipped
    it = 0

    def directions(p_normal):
        if not active:
            return Hinv @ p_normal, np.zeros(0)
        Na = (N_all[active] * sign[active, None]).T
        M = Na.T @ Hinv @ Na
        Nstar = np.linalg.solve(M, Na.T @ Hinv)
        z = Hinv @ p_normal - Hinv @ Na @ (Nstar @ p_normal)
        return z, Nstar @ p_normal

    def add(p, is_eq):
        nonlocal x, u, active, it
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise QpMaxIter(f"QP did not converge in {max_iter} iterations")
            np_ = N_all[p] * sign[p]
            s = np_ @ x - b_all[p] * sign[p]
            z, r = directions(np_)
            zn = z @ np_
            t2 = np.inf if abs(zn) <= 1e-14 * (np_ @ np_) else -s / zn
            t1, k = np.inf, -1
            for j, idx in enumerate(active):
                if idx >= meq and r[j] > 1e-14:
                    t = u[j] / r[j]
                    if t < t1:
                        t1, k = t, j
            if is_eq and not np.isfinite(t2):
                if abs(s) <= tol * (1 + abs(b_all[p])):
                    return  # redundant equality
                if not np.isfinite(t1):
                    raise QpInfeasible("equality constraints are inconsistent")
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasible("constraints are infeasible")
            if np.isfinite(t2):
                x = x + t * z
            u = u - t * r
            u_p += t
            if t == t2:
                active.append(p)
                u = np.append(u, u_p)
                return
            # blocking constraint leaves the active set
            active.pop(k)
            u = np.delete(u, k)

    for p in range(meq):
        s = N_all[p] @ x - b_all[p]
        if s > 0:
            sign[p] = -1.0
        add(p, True)

    while True:
        if len(b_all) == meq:
            break
        s = (N_all[meq:] @ x - b_all[meq:]) / scale[meq:]
        s[[i - meq for i in active if i >= meq]] = np.inf
        j = int(np.argmin(s))
        if s[j] >= -tol:
            break
        add(meq + j, False)

    lam_all = np.zeros(len(b_all))
    for idx, val in zip(active, u):
        lam_all[idx] = val * sign[idx]
    nu = -lam_all[:meq]
    lam = lam_all[meq:]
    sol = QpSolution(x, lam, nu, prob.objective(x), it, sorted(i - meq for i in active if i >= meq))
    sol.residuals = kkt_residuals(prob, x, lam, nu)
    return sol
