import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import qp_brute_force

from esodk.qp import QpInfeasible, QpProblem, kkt_residuals, qp_solve


def random_qp(rng, n, m):
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    return H, rng.standard_normal(n), rng.standard_normal((m, n)), rng.uniform(-0.5, 1.0, m)


def test_one_dimensional_lower_bound():
    # min x^2  s.t.  x >= 1
    sol = qp_solve(QpProblem([[2.0]], [0.0], G=[[-1.0]], h=[-1.0]))
    assert sol.x[0] == pytest.approx(1.0, abs=1e-12)
    assert sol.lam[0] == pytest.approx(2.0, abs=1e-12)
    assert sol.objective == pytest.approx(1.0)


def test_inactive_bound_leaves_unconstrained_minimum():
    sol = qp_solve(QpProblem([[2.0]], [-1.0], G=[[1.0]], h=[5.0]))
    assert sol.x[0] == pytest.approx(0.5)
    assert sol.active == [] and sol.lam[0] == 0.0


def test_unconstrained_matches_linear_solve(rng):
    H, f, _, _ = random_qp(rng, 6, 0)
    sol = qp_solve(QpProblem(H, f))
    np.testing.assert_allclose(H @ sol.x, -f, atol=1e-10)


def test_equality_projection():
    # min |x|^2  s.t.  x1 + x2 = 2  ->  (1, 1)
    sol = qp_solve(QpProblem(2 * np.eye(2), np.zeros(2), Aeq=[[1.0, 1.0]], beq=[2.0]))
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 6))
def test_matches_active_set_enumeration(seed, n, m):
    rng = np.random.default_rng(seed)
    H, f, G, h = random_qp(rng, n, m)
    ref = qp_brute_force(H, f, G, h)
    try:
        sol = qp_solve(QpProblem(H, f, G, h))
    except QpInfeasible:
        assert ref is None
        return
    assert ref is not None
    assert sol.objective == pytest.approx(ref[1], abs=1e-8)
    np.testing.assert_allclose(sol.x, ref[0], atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_kkt_conditions(seed):
    rng = np.random.default_rng(seed)
    n = 5
    H, f, _, _ = random_qp(rng, n, 0)
    # box around a feasible interior point keeps every instance feasible
    G = np.vstack([np.eye(n), -np.eye(n), rng.standard_normal((3, n))])
    h = np.concatenate([np.full(n, 0.3), np.full(n, 0.3), rng.uniform(0.1, 1.0, 3)])
    sol = qp_solve(QpProblem(H, f, G, h))
    r = kkt_residuals(QpProblem(H, f, G, h), sol.x, sol.lam, sol.nu)
    assert r["stationarity"] < 1e-8
    assert r["primal"] < 1e-9 and r["dual"] == 0.0 and r["complementarity"] < 1e-9


def test_infeasible_bounds_raise():
    with pytest.raises(QpInfeasible):
        qp_solve(QpProblem(np.eye(1), [0.0], G=[[1.0], [-1.0]], h=[-1.0, -1.0]))   # x <= -1 and x >= 1
    with pytest.raises(QpInfeasible):
        qp_solve(QpProblem(np.eye(1), [0.0], Aeq=[[1.0], [1.0]], beq=[0.0, 1.0]))


def test_bad_hessians_rejected():
    with pytest.raises(ValueError):
        qp_solve(QpProblem(np.diag([1.0, -1.0]), np.zeros(2)))
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(3))
