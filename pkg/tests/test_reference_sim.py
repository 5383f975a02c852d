import math
from dataclasses import replace

import numpy as np
import pytest

from esodk.controllers import BicycleModel, MpcConfig
from esodk.data import ExcitationSpec, collect_dataset, coverage, windows
from esodk.eso import design_gains
from esodk.reference import (DlcGeometry, ReferencePath, dlc_lateral, gen_dlc_reference, reference_window,
                             straight_reference)
from esodk.sim import (METRICS_COLUMNS, SCENARIOS, TRACE_COLUMNS, RunTrace, Scenario, compare, compute_metrics,
                       make_controller, metrics_csv, mirrored, run_closed_loop)
from esodk.vehicle import VehicleParams

G = DlcGeometry()
DLC = gen_dlc_reference(G)
BIKE = BicycleModel.from_params(VehicleParams(), 0.85)
SHORT = replace(SCENARIOS["dlc_highmu"], duration=2.0)


def trace_with(eY, dphi=None, solve_ms=1.0):
    n = len(eY)
    data = np.zeros((n, len(TRACE_COLUMNS)))
    data[:, 0] = np.arange(n) * 0.025
    data[:, TRACE_COLUMNS.index("eY")] = eY
    data[:, TRACE_COLUMNS.index("dphi")] = np.zeros(n) if dphi is None else dphi
    data[:, TRACE_COLUMNS.index("solve_ms")] = solve_ms
    return RunTrace("x", "s", data)


# --- reference geometry ---------------------------------------------------

def test_dlc_starts_at_origin_and_is_flat_first():
    np.testing.assert_array_equal([DLC.X[0], DLC.Y[0], DLC.theta[0]], [0.0, 0.0, 0.0])
    assert np.all(DLC.Y[DLC.X < G.breakpoints[1]] == 0.0)


def test_dlc_plateau_height():
    assert DLC.Y.max() == 3.5
    on = (DLC.X >= G.breakpoints[2]) & (DLC.X < G.breakpoints[3])
    assert np.all(DLC.Y[on] == 3.5)
    assert np.all(DLC.Y[DLC.X >= G.breakpoints[4]] == 0.0)


def test_dlc_heading_steps_bounded():
    # slope of atan(dY/dX) is at most the second-derivative bound of the blend
    bound = G.max_curvature_bound()
    assert bound == pytest.approx(0.5 * 3.5 * (math.pi / 25.0) ** 2)
    assert np.max(np.abs(np.diff(DLC.theta))) < 2 * bound * G.spacing


def test_dlc_is_c1_at_breakpoints():
    eps = 1e-9
    for b in G.breakpoints:
        y0, d0 = dlc_lateral(np.array([b - eps]), G)
        y1, d1 = dlc_lateral(np.array([b + eps]), G)
        assert abs(y1[0] - y0[0]) < 1e-7 and abs(d1[0] - d0[0]) < 1e-7


def test_dlc_slope_matches_finite_difference():
    X = np.linspace(1.0, 105.0, 300)
    h = 1e-6
    num = (dlc_lateral(X + h, G)[0] - dlc_lateral(X - h, G)[0]) / (2 * h)
    np.testing.assert_allclose(dlc_lateral(X, G)[1], num, atol=1e-6)


def test_geometry_validation():
    with pytest.raises(ValueError):
        DlcGeometry(sections=(1.0, 2.0))
    with pytest.raises(ValueError):
        DlcGeometry(spacing=0.0)
    with pytest.raises(ValueError):
        ReferencePath([0.0, 0.0], [0.0, 0.0], [0.0, 0.0])


def test_projection_sign_and_distance():
    path = straight_reference(50.0)
    eY, s, th, Xr, Yr = path.project(10.0, 0.7)
    assert eY == pytest.approx(0.7) and s == pytest.approx(10.0) and th == 0.0
    assert path.project(10.0, -0.7)[0] == pytest.approx(-0.7)
    diag = straight_reference(50.0, heading=math.pi / 4)
    assert diag.project(0.0, 2.0)[0] == pytest.approx(math.sqrt(2.0))


def test_mirror_negates_lateral_error():
    m = DLC.mirrored()
    for X, Y in [(40.0, 1.0), (60.0, 3.0), (85.0, 2.2)]:
        assert m.project(X, -Y)[0] == pytest.approx(-DLC.project(X, Y)[0], abs=1e-12)


def test_reference_window_spacing():
    path = straight_reference(100.0)
    w = reference_window(path, 3.0, 0.2, 10.0, 9.0, 4, 0.025)
    np.testing.assert_allclose(w.poses[:, 0], 3.0 + 0.25 * np.arange(1, 5))
    np.testing.assert_array_equal(w.poses[:, 1:], 0.0)
    assert w.Vx_r == 9.0 and len(w) == 4


# --- metrics ----------------------------------------------------------------

def test_metrics_zero_trace():
    m = compute_metrics(trace_with(np.zeros(5)))
    assert m.eY == (0.0, 0.0, 0.0) and m.dphi == (0.0, 0.0, 0.0)


def test_metrics_constant_error():
    m = compute_metrics(trace_with(np.full(7, -0.1)))
    assert m.eY == pytest.approx((0.1, 0.1, 0.1), abs=1e-15)


def test_metrics_three_samples():
    m = compute_metrics(trace_with(np.array([0.1, -0.2, 0.2]), solve_ms=np.array([1.0, 2.0, 6.0])))
    assert m.eY[0] == pytest.approx(0.2)
    assert m.eY[1] == pytest.approx(0.1667, abs=5e-5)
    assert m.eY[2] == pytest.approx(math.sqrt(0.09 / 3), abs=1e-15)   # 0.1732
    assert m.solve_ms_avg == pytest.approx(3.0)
    with pytest.raises(ValueError):
        compute_metrics(trace_with(np.zeros(0)))


def test_metrics_csv_layout():
    m = compute_metrics(trace_with(np.array([0.1, 0.2])))
    lines = metrics_csv([m], timing=False).splitlines()
    assert lines[0].split(",") == list(METRICS_COLUMNS)
    assert lines[1].split(",")[-2:] == ["0.0", "0"]


# --- closed loop --------------------------------------------------------------

def test_scenarios_match_stated_conditions():
    hi, lo = SCENARIOS["dlc_highmu"], SCENARIOS["dlc_lowmu"]
    assert hi.mu == 0.85 and hi.speed_ref(0.0) == pytest.approx(35 / 3.6) and hi.speed_ref(9.0) == hi.speed_ref(0.0)
    assert lo.mu == 0.5 and lo.initial_speed_kmh == 50.0
    assert lo.speed_ref(0.0) == pytest.approx(45 / 3.6) and lo.speed_ref(lo.duration) == pytest.approx(55 / 3.6)
    with pytest.raises(ValueError):
        Scenario("bad", 0.0, ((0.0, 30.0),), 1.0, 30.0)
    with pytest.raises(ValueError):
        Scenario("bad", 0.5, ((0.0, 30.0),), 0.0, 30.0)


def test_trace_length_and_spacing():
    tr = run_closed_loop(SHORT, make_controller("lmpc", MpcConfig(), bike=BIKE))
    assert len(tr) == math.ceil(2.0 / 0.025) and not tr.diverged
    np.testing.assert_allclose(np.diff(tr.column("t")), 0.025, atol=1e-12)
    assert tr.to_csv().splitlines()[0].split(",") == list(TRACE_COLUMNS)


def test_mirrored_run_is_mirror_image():
    c = MpcConfig()
    a = run_closed_loop(SHORT, make_controller("lmpc", c, bike=BIKE))
    b = run_closed_loop(mirrored(SHORT), make_controller("lmpc", c, bike=BIKE))
    np.testing.assert_allclose(b.column("eY"), -a.column("eY"), atol=1e-9)
    np.testing.assert_allclose(b.column("delta_f"), -a.column("delta_f"), atol=1e-9)


def test_compare_rows_follow_request_and_recompute(quick_model):
    gains = design_gains(quick_model.A_theta, 0.5)
    kinds = ["eso-dkmpc", "lmpc", "dkmpc"]
    res = compare(SHORT, kinds, MpcConfig(), quick_model, gains, BIKE)
    assert [m.controller for m in res.metrics] == kinds
    for tr, m in zip(res.traces, res.metrics):
        again = compute_metrics(tr)
        assert again.eY == m.eY and again.dphi == m.dphi
        assert m.eY[0] >= m.eY[2] >= 0 and m.eY[1] <= m.eY[0]
    with pytest.raises(ValueError):
        compare(SHORT, ["pid"], MpcConfig(), bike=BIKE)


def test_closed_loop_is_deterministic(quick_model):
    gains = design_gains(quick_model.A_theta, 0.5)
    runs = [compare(SHORT, ["eso-dkmpc"], MpcConfig(), quick_model, gains) for _ in range(2)]
    assert runs[0].traces[0].to_csv(timing=False) == runs[1].traces[0].to_csv(timing=False)


def test_departure_is_flagged():
    # a wildly wrong steering model cannot follow the lane change
    bad = BicycleModel(BIKE.m, BIKE.Iz, BIKE.lf, BIKE.lr, -BIKE.Cf, BIKE.Cr)
    tr = run_closed_loop(replace(SCENARIOS["dlc_highmu"], duration=8.0), make_controller("lmpc", MpcConfig(), bike=bad))
    assert tr.diverged and tr.message and len(tr) < 320


# --- data collection ----------------------------------------------------------

def test_windows_slicing():
    X = np.arange(11 * 3, dtype=float).reshape(11, 3)
    U = np.arange(10 * 2, dtype=float).reshape(10, 2)
    wx, wu = windows(X, U, 4, 3)
    assert wx.shape == (3, 5, 3) and wu.shape == (3, 4, 2)
    np.testing.assert_array_equal(wx[1, 0], X[3])
    np.testing.assert_array_equal(wu[2, -1], U[9])


def test_dataset_properties(plant_dataset):
    ds = plant_dataset
    assert ds.Ts == 0.025 and np.all(np.isfinite(ds.X))
    assert ds.X.shape[1:] == (11, 3) and ds.U.shape[1:] == (10, 2)
    assert 0 < ds.is_val.sum() < len(ds)
    assert np.max(np.abs(ds.U[..., 1])) <= 0.3


def test_dataset_coverage():
    spec = ExcitationSpec()
    steer, speed = coverage(collect_dataset(VehicleParams(), spec, seed=0), spec)
    assert np.all(steer > 0) and np.all(speed > 0)


def test_dataset_is_seeded():
    spec = ExcitationSpec(episodes=3, duration=2.0)
    a = collect_dataset(VehicleParams(), spec, seed=5)
    b = collect_dataset(VehicleParams(), spec, seed=5)
    c = collect_dataset(VehicleParams(), spec, seed=6)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.is_val, b.is_val)
    assert not np.array_equal(a.X, c.X)
