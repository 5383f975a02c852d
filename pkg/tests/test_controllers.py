import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esodk import koopman
from esodk.controllers import (BicycleModel, MpcConfig, bicycle_prediction, blocking_matrix,
                               koopman_prediction, p_longitudinal, shifted_seed, solve_dkmpc,
                               solve_eso_dkmpc, solve_lmpc, sqp_solve)
from esodk.eso import EsoState, design_gains
from esodk.reference import DlcGeometry, gen_dlc_reference, reference_window, straight_reference
from esodk.sim import CONTROLLERS, SCENARIOS, LoopConfig, Scenario, make_controller, run_closed_loop
from esodk.vehicle import Pose, VehicleParams

P = VehicleParams()
BIKE = BicycleModel.from_params(P, 0.85)
STRAIGHT = straight_reference(300.0)
DLC = gen_dlc_reference()


def window(path, pose, speed, cfg):
    return reference_window(path, pose.X, pose.Y, speed, speed, cfg.Np, cfg.Ts)


def test_p_longitudinal_examples():
    assert p_longitudinal(20.0, 19.0, 800.0, 3000.0) == 800.0
    assert p_longitudinal(20.0, 10.0, 800.0, 3000.0) == 3000.0
    assert p_longitudinal(10.0, 20.0, 800.0, 3000.0) == -3000.0
    assert p_longitudinal(15.0, 15.0, 800.0, 3000.0) == 0.0
    with pytest.raises(ValueError):
        p_longitudinal(1.0, 0.0, 0.0, 3000.0)


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(Np=3, Nc=5)
    with pytest.raises(ValueError):
        MpcConfig(R=0.0)
    with pytest.raises(ValueError):
        MpcConfig(Q=(1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        MpcConfig(delta_min=0.1, delta_max=-0.1)
    np.testing.assert_array_equal(MpcConfig().Q_matrix, np.diag([10.0, 10.0, 50.0]))


def test_blocking_matrix_holds_last_move():
    M = blocking_matrix(5, 2)
    np.testing.assert_array_equal(M, [[1, 0], [0, 1], [0, 1], [0, 1], [0, 1]])
    np.testing.assert_array_equal(blocking_matrix(3, 3), np.eye(3))


def test_axle_stiffness_is_magic_formula_slope():
    Fz = P.static_loads()
    per_tire = P.B_mf * P.C_mf * P.D_mf * 0.85
    assert BIKE.Cf == pytest.approx(2 * per_tire * Fz[0], rel=1e-12)
    assert BIKE.Cr == pytest.approx(2 * per_tire * Fz[2], rel=1e-12)


def test_bicycle_discrete_hand_values():
    b = BicycleModel(m=1000.0, Iz=2000.0, lf=1.0, lr=1.5, Cf=5e4, Cr=6e4)
    Ad, Bd = b.discrete(20.0, 0.01)
    Ac11 = -(1.1e5) / (1000 * 20)
    Ac12 = -20 - (5e4 - 9e4) / (1000 * 20)
    Ac21 = -(5e4 - 9e4) / (2000 * 20)
    Ac22 = -(5e4 + 6e4 * 2.25) / (2000 * 20)
    np.testing.assert_allclose(Ad, np.eye(2) + 0.01 * np.array([[Ac11, Ac12], [Ac21, Ac22]]), rtol=1e-14)
    np.testing.assert_allclose(Bd, [0.01 * 50.0, 0.01 * 25.0], rtol=1e-14)


def test_bicycle_prediction_matches_recursion(rng):
    x = np.array([12.0, 0.3, -0.1])
    steer = rng.uniform(-0.2, 0.2, 8)
    pred = bicycle_prediction(BIKE, x, 8, 0.025)
    Ad, Bd = BIKE.discrete(12.0, 0.025)
    s = x[1:].copy()
    for i in range(8):
        s = Ad @ s + Bd * steer[i]
        np.testing.assert_allclose(pred.free[i] + pred.sens[i] @ steer, [12.0, *s], atol=1e-12)


def test_koopman_prediction_matches_rollout(model, rng):
    x = np.array([14.0, 0.1, 0.05])
    steer = rng.uniform(-0.2, 0.2, 6)
    w = 0.01 * rng.standard_normal(model.dims.q)
    pred = koopman_prediction(model, x, 500.0, w, 6)
    z = koopman.lift(model, x)
    for i in range(6):
        z = model.A_theta @ z + model.B_theta @ np.array([500.0, steer[i]]) + w
        np.testing.assert_allclose(pred.free[i] + pred.sens[i] @ steer, z[:3], atol=1e-10)


def test_on_path_straight_gives_zero_steer():
    cfg = MpcConfig()
    pose = Pose(10.0, 0.0, 0.0)
    sol = solve_lmpc(BIKE, pose, np.array([15.0, 0.0, 0.0]), window(STRAIGHT, pose, 15.0, cfg), 0.0, 0.0, cfg)
    assert sol.delta == 0.0
    np.testing.assert_array_equal(sol.moves, 0.0)
    assert sol.objectives[-1] == pytest.approx(0.0, abs=1e-18)


def test_single_move_single_step_closed_form():
    # with Np = Nc = 1 the first pose does not depend on the move, so only the
    # regularisation is left: min R d^2 + P (d - d_prev)^2
    cfg = MpcConfig(Np=1, Nc=1, R=1.0, P=100.0)
    pose = Pose(0.0, 0.4, 0.0)
    for d_prev in (0.1, -0.25, 0.0):
        sol = solve_lmpc(BIKE, pose, np.array([15.0, 0.0, 0.0]), window(STRAIGHT, pose, 15.0, cfg), 0.0,
                         d_prev, cfg)
        assert sol.delta == pytest.approx(100.0 * d_prev / 101.0, abs=1e-12)


def _true_cost(pred, pose, ref, d, d_prev, cfg):
    steer = np.full(cfg.Np, d)
    X = pred.free + pred.sens @ steer
    Xin = np.vstack([pred.x0, X[:-1]])
    eta = np.array(pose.as_array(), dtype=float)
    cost = cfg.R * d * d + cfg.P * (d - d_prev) ** 2
    Q = cfg.Q_matrix
    for i in range(cfg.Np):
        Vx, Vy, wr = Xin[i]
        th = eta[2]
        eta = eta + cfg.Ts * np.array([Vx * math.cos(th) - Vy * math.sin(th),
                                       Vx * math.sin(th) + Vy * math.cos(th), wr])
        e = eta - ref.poses[i]
        cost += e @ Q @ e
    return cost


@pytest.mark.parametrize("offset", [0.5, -1.0, 0.1])
def test_single_move_matches_scalar_search(offset):
    cfg = MpcConfig(Np=8, Nc=1, sqp_iters=60, sqp_tol=1e-13)
    pose = Pose(25.0, 0.8 + offset, 0.05)
    x = np.array([11.0, 0.05, 0.02])
    ref = window(DLC, pose, 11.0, cfg)
    pred = bicycle_prediction(BIKE, x, cfg.Np, cfg.Ts)
    sol = sqp_solve(pred, pose, ref, 0.0, 0.02, cfg)
    grid = np.linspace(cfg.delta_min, cfg.delta_max, 20_001)
    costs = [_true_cost(pred, pose, ref, d, 0.02, cfg) for d in grid]
    i = int(np.argmin(costs))
    fine = np.linspace(grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)], 2001)
    best = fine[int(np.argmin([_true_cost(pred, pose, ref, d, 0.02, cfg) for d in fine]))]
    assert sol.delta == pytest.approx(best, abs=1e-6)


def test_large_offset_saturates_steering():
    cfg = MpcConfig()
    pose = Pose(10.0, -4.0, 0.0)
    sol = solve_lmpc(BIKE, pose, np.array([15.0, 0.0, 0.0]), window(STRAIGHT, pose, 15.0, cfg), 0.0, 0.3, cfg)
    assert sol.delta == pytest.approx(cfg.delta_max)
    assert 0 in sol.active     # the upper bound on the first move is an active row


@settings(max_examples=25, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(-0.2, 0.2), st.floats(5.0, 80.0), st.floats(8.0, 20.0),
       st.floats(-0.3, 0.3))
def test_solution_respects_bounds(dy, dth, X, speed, d_prev):
    cfg = MpcConfig()
    Y0 = float(np.interp(X, DLC.X, DLC.Y))
    pose = Pose(X, Y0 + dy, dth)
    sol = solve_lmpc(BIKE, pose, np.array([speed, 0.0, 0.0]), window(DLC, pose, speed, cfg), 0.0, d_prev, cfg)
    assert np.all(sol.moves <= cfg.delta_max + 1e-12) and np.all(sol.moves >= cfg.delta_min - 1e-12)
    lo, hi = np.asarray(cfg.x_min), np.asarray(cfg.x_max)
    assert np.all(sol.states[:, 1:] <= hi[1:] + 1e-6) and np.all(sol.states[:, 1:] >= lo[1:] - 1e-6)
    assert sol.T == 0.0


class Recording:
    """Controller wrapper that keeps every solution's SQP objective history."""

    def __init__(self, inner):
        self.inner, self.cfg, self.name = inner, inner.cfg, inner.name
        self.history = []

    def command(self, *args):
        out = self.inner.command(*args)
        self.history.append(list(out[0].objectives))
        return out


@pytest.mark.parametrize("kind", CONTROLLERS)
def test_sqp_objective_non_increasing_on_dlc(kind, quick_model):
    cfg = MpcConfig()
    gains = design_gains(quick_model.A_theta, 0.5)
    rec = Recording(make_controller(kind, cfg, quick_model, gains, BIKE))
    scenario = replace(SCENARIOS["dlc_highmu"], duration=6.0)
    trace = run_closed_loop(scenario, rec)
    assert not trace.diverged
    worst = max((max(np.diff(h[1:]), default=-np.inf) for h in rec.history), default=-np.inf)
    assert worst <= 1e-9


def test_torque_is_passed_through(model):
    cfg = MpcConfig()
    pose = Pose()
    sol = solve_dkmpc(model, pose, np.array([12.0, 0.0, 0.0]), window(STRAIGHT, pose, 12.0, cfg), 1234.5, 0.0,
                      cfg)
    assert sol.T == 1234.5


def test_lateral_velocity_bound_binds():
    cfg = MpcConfig(x_min=(0.5, -0.05, -1.5), x_max=(80.0, 0.05, 1.5))
    pose = Pose(10.0, -2.0, 0.0)
    sol = solve_lmpc(BIKE, pose, np.array([15.0, 0.0, 0.0]), window(STRAIGHT, pose, 15.0, cfg), 0.0, 0.0, cfg)
    assert np.max(np.abs(sol.states[:, 1])) <= 0.05 + 1e-9
    loose = solve_lmpc(BIKE, pose, np.array([15.0, 0.0, 0.0]), window(STRAIGHT, pose, 15.0, MpcConfig()), 0.0,
                       0.0, MpcConfig())
    assert np.max(np.abs(loose.states[:, 1])) > 0.05


def test_shift_property_is_approximate():
    # re-solving from the predicted next state on a straight road gives nearly
    # the tail of the previous plan; the horizon end moving on makes it inexact
    cfg = MpcConfig()
    x, pose = np.array([10.0, 0.0, 0.0]), Pose(0.0, 0.3, 0.0)
    s1 = solve_lmpc(BIKE, pose, x, window(STRAIGHT, pose, 10.0, cfg), 0.0, 0.0, cfg)
    x1, p1 = s1.states[0], Pose(*s1.poses[0])
    s2 = solve_lmpc(BIKE, p1, x1, window(STRAIGHT, p1, x1[0], cfg), 0.0, s1.delta, cfg, shifted_seed(s1))
    assert abs(s2.delta - s1.moves[1]) < 0.02
    assert np.sign(s2.delta) == np.sign(s1.moves[1])


def test_shifted_seed():
    assert shifted_seed(None) is None
    from esodk.controllers import MpcSolution
    s = MpcSolution(0.1, np.array([0.1, 0.2, 0.3]), np.zeros((4, 3)), np.zeros((4, 3)), 0.0)
    np.testing.assert_array_equal(shifted_seed(s), [0.2, 0.3, 0.3])


def test_dkmpc_is_eso_with_zero_disturbance(model):
    cfg = MpcConfig()
    x = np.array([12.0, 0.05, 0.01])
    pose = Pose(20.0, 0.3, 0.02)
    ref = window(DLC, pose, 12.0, cfg)
    a = solve_dkmpc(model, pose, x, ref, 200.0, 0.01, cfg)
    est = EsoState.start(koopman.lift(model, x))
    b = solve_eso_dkmpc(model, est, pose, x, ref, 200.0, 0.01, cfg)
    np.testing.assert_array_equal(a.moves, b.moves)


def test_disturbance_estimate_shifts_prediction(model):
    cfg = MpcConfig()
    x = np.array([12.0, 0.0, 0.0])
    w = np.zeros(model.dims.q)
    w[1] = 0.01                    # lateral-velocity bias per step
    p0 = koopman_prediction(model, x, 0.0, None, cfg.Np)
    p1 = koopman_prediction(model, x, 0.0, w, cfg.Np)
    np.testing.assert_allclose(p1.free[0] - p0.free[0], w[:3], atol=1e-14)
    np.testing.assert_array_equal(p1.sens, p0.sens)
    with pytest.raises(ValueError):
        solve_eso_dkmpc(model, None, Pose(), x, window(STRAIGHT, Pose(), 12.0, cfg), 0.0, 0.0, cfg,
                        w=np.zeros(2))


def test_window_length_checked():
    cfg = MpcConfig()
    ref = reference_window(STRAIGHT, 0.0, 0.0, 10.0, 10.0, 5, cfg.Ts)
    with pytest.raises(ValueError):
        solve_lmpc(BIKE, Pose(), np.array([10.0, 0.0, 0.0]), ref, 0.0, 0.0, cfg)


def test_eso_rejects_constant_lateral_disturbance(quick_model):
    cfg = MpcConfig()
    gains = design_gains(quick_model.A_theta, 0.5)
    straight = Scenario("straight", 0.85, ((0.0, 40.0),), 6.0, 40.0, geometry=DlcGeometry(offset=0.0))
    loop = LoopConfig(lateral_disturbance=0.5)
    settled = {}
    for kind in ("dkmpc", "eso-dkmpc"):
        trace = run_closed_loop(straight, make_controller(kind, cfg, quick_model, gains), loop=loop)
        assert not trace.diverged
        settled[kind] = float(np.mean(np.abs(trace.column("eY")[-40:])))
    assert settled["eso-dkmpc"] < settled["dkmpc"]
