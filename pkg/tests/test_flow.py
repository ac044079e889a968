import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from yamabe_typeii import barrier as bar
from yamabe_typeii import diagnostics as diag
from yamabe_typeii import flow
from yamabe_typeii import soliton as sol
from yamabe_typeii.coords import Coord, Profile, TimeKind, make_params

P5 = make_params(5)


@pytest.fixture(scope="module")
def b():
    return bar.assemble(P5, eps=0.05, xi0=1.4, xi1=1.4, tau0=5.0, tau1=6.0)


# ---------------------------------------------------------------------------
# states and single steps


def test_state_validation():
    x = np.linspace(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        flow.FlowState("cylindrical-st", 0.0, x, -np.ones(10))
    with pytest.raises(ValueError):
        flow.FlowState("cylindrical-st", 0.0, x**2, np.ones(10))
    with pytest.raises(ValueError):
        flow.FlowState("cylindrical-st", 0.0, x[:4], np.ones(4))
    st = flow.FlowState("cylindrical-st", 0.0, x, np.ones(10))
    with pytest.raises(ValueError):
        flow.step(st, 0.0, P5)


def test_constant_data_stays_constant_and_follows_cylinder():
    s = np.linspace(-4.0, 4.0, 161)
    state = flow.FlowState("cylindrical-st", 0.0, s, np.full_like(s, 6.0), flow.Boundary(0.0, "robin", 0.0))
    for _ in range(200):
        state = flow.step(state, 1e-3, P5)
        v = state.values
        assert np.ptp(v) <= 1e-10 * v.mean()
    assert np.max(np.abs(state.values - (6.0 - 12.0 * state.time))) <= 6e-8


def test_shrinking_sphere_in_cylindrical_coordinates():
    s = np.linspace(-12.0, 12.0, 2000)
    w0 = 1.0 / np.cosh(s) ** 2
    state = flow.FlowState("cylindrical-st", 0.0, s, w0, flow.Boundary(2.0, "robin", -2.0))
    while state.time < 0.01 - 1e-14:
        state = flow.step(state, min(1e-4, 0.01 - state.time), P5)
        assert np.all(state.values > 0)
    mask = s <= math.log(3.0)
    exact = (1.0 - 20.0 * state.time) * w0[mask]
    assert np.max(np.abs(state.values[mask] - exact) / exact) <= 1e-3


def test_step_records_statistics():
    s = np.linspace(-4.0, 4.0, 41)
    state = flow.FlowState("cylindrical-st", 0.0, s, np.full_like(s, 6.0), flow.Boundary(0.0, "robin", 0.0))
    new = flow.step(state, 1e-3, P5)
    assert new.stats["rejections"] == 0 and new.stats["dt"] == 1e-3 and new.stats["newton_iterations"] >= 1
    assert new.time == pytest.approx(1e-3)


def test_tail_boundary_needs_rescaled_mode():
    s = np.linspace(-4.0, 4.0, 41)
    state = flow.FlowState("cylindrical-st", 0.0, s, np.full_like(s, 6.0), flow.Boundary(2.0, "tail"))
    with pytest.raises(ValueError):
        flow.step(state, 1e-3, P5)


def test_tail_value_and_corridor():
    lo, mid, up = flow.corridor(12.0, 8.0, P5)
    assert lo < mid < up
    d = 12.0 * math.exp(-8.0)
    assert mid == pytest.approx(12.0 * d / (1 + d) / math.exp(-8.0), rel=1e-12)


# ---------------------------------------------------------------------------
# rescaled mode


def test_soliton_barely_drifts_in_rescaled_flow():
    prof = sol.solve_soliton(P5)
    xi = flow.uniform_grid(-8.0, 12.0, 801)
    w0 = sol.eval(prof, xi)
    edge = float(w0[-1])
    state = flow.FlowState("rescaled-xitau", 12.0, xi, w0, flow.Boundary(2.0, "dirichlet", right_value=lambda tau: edge))
    cfg = flow.RunConfig(P5, tau_span=1.0, check_corridor=False)
    result = flow.run(cfg, state=state)
    assert result.aborted is None and result.final.tau == pytest.approx(13.0)
    assert np.max(np.abs(result.final.values - w0) / w0) <= 1e-3


def test_initial_midpoint_lies_inside_barriers(b):
    state = flow.init_from_barrier_mid(b)
    assert state.time == b.tau1 and state.mode == "rescaled-xitau"
    assert flow.sandwich_check(state, b) < 0
    with pytest.raises(ValueError):
        flow.init_from_barrier_mid(b, b.tau1 - 1.0)


def test_sandwich_check_boundary_and_negative_control(b):
    xi = flow.uniform_grid(-8.0, 12.0, 801)
    up = b.composite(xi, 7.0, "+")
    on = flow.FlowState("rescaled-xitau", 7.0, xi, up)
    assert flow.sandwich_check(on, b) == pytest.approx(0.0, abs=1e-15)
    above = flow.FlowState("rescaled-xitau", 7.0, xi, 1.01 * up)
    assert flow.sandwich_check(above, b) == pytest.approx(0.01, rel=1e-9)


def test_short_run_stays_sandwiched_and_positive(b):
    cfg = flow.RunConfig(P5, tau_span=1.0, cadence=0.25)
    result = flow.run(cfg, barrier=b)
    assert result.aborted is None
    assert [round(s.tau, 10) for s in result.snapshots] == [6.0, 6.25, 6.5, 6.75, 7.0]
    assert result.worst_sandwich < 0
    assert all(np.all(s.values > 0) for s in result.snapshots)
    man = result.manifest()
    assert man["config_sha256"] == cfg.digest() and man["abort_reason"] is None
    json.dumps(man)


def test_run_aborts_when_boundary_leaves_corridor(b):
    xi = flow.uniform_grid(-8.0, 12.0, 801)
    w = np.sqrt(b.composite(xi, 6.0, "+") * b.composite(xi, 6.0, "-"))
    state = flow.FlowState("rescaled-xitau", 3.0, xi, w)
    result = flow.run(flow.RunConfig(P5, tau_span=0.5), state=state)
    assert result.aborted is not None and "corridor" in result.aborted
    assert len(result.snapshots) == 1


def test_run_config_validation():
    with pytest.raises(ValueError):
        flow.RunConfig(P5, xi_min=-4.0)
    with pytest.raises(ValueError):
        flow.RunConfig(P5, dt_min=1e-2, dt_start=1e-3)
    with pytest.raises(ValueError):
        flow.RunConfig(P5, tau_span=0.0)
    with pytest.raises(ValueError):
        flow.RunConfig(P5, initial_data="custom-file")


def test_custom_file_round_trip(tmp_path, b):
    xi = flow.uniform_grid(-8.0, 12.0, 401)
    w = np.sqrt(b.composite(xi, 6.5, "+") * b.composite(xi, 6.5, "-"))
    path = tmp_path / "start.csv"
    Profile(Coord.INNER, TimeKind.TAU, 6.5, xi, w).to_csv(path)
    gx, gw, tau = flow.load_custom(path)
    assert tau == 6.5 and np.array_equal(gx, xi) and np.array_equal(gw, w)
    cfg = flow.RunConfig(P5, initial_data="custom-file", custom_file=str(path), tau_span=0.2)
    assert flow.run(cfg, barrier=b).final.tau == pytest.approx(6.7)
    Profile(Coord.CYLINDRICAL, TimeKind.T, 0.0, xi, w).to_csv(path)
    with pytest.raises(ValueError):
        flow.load_custom(path)


# ---------------------------------------------------------------------------
# general data


def test_condition_ii_data_properties():
    p = replace(P5, T=math.exp(-6.0))
    data = flow.condition_ii_data(p)
    tip = p.A * p.T ** (-p.gamma)
    s = tip + np.concatenate([np.linspace(-20.0, 20.0, 4000), np.geomspace(1.0, 1e6, 200)])
    data.validate(s)
    w = data(s)
    assert np.all(w > 0) and np.all(w < p.cyl * p.T)
    left = tip + np.array([-20.0, -18.0])
    assert data(left[1]) / data(left[0]) == pytest.approx(math.exp(2 * (left[1] - left[0])), rel=1e-6)
    xi = np.linspace(-8.0, 12.0, 50)
    assert np.allclose(data.rescaled(xi), p.T ** -2 * data(tip + xi), rtol=1e-14)


def test_condition_ii_data_rejects_bad_parameters():
    p = replace(P5, T=math.exp(-6.0))
    with pytest.raises(ValueError):
        flow.condition_ii_data(p, s_c=-1.0)
    with pytest.raises(ValueError):
        flow.condition_ii_data(p, floor_height=1e9)
    bad = replace(flow.condition_ii_data(p), f_max=2 * p.T)
    with pytest.raises(ValueError):
        bad.validate(np.linspace(0.0, 500.0, 100))


def test_general_data_fits_between_translated_barriers(b):
    p = replace(P5, T=math.exp(-b.tau1))
    state = flow.init_condition_ii(p)
    xa, xb = diag.fit_shifts(state.grid, state.values, b, state.time)
    assert xa > xb
    cyl = flow.init_condition_ii(p, mode="cylindrical-st")
    assert cyl.time == 0.0 and cyl.grid[0] == pytest.approx(p.A * math.exp(b.tau1) - 8.0)


def test_cylindrical_and_rescaled_solvers_agree():
    """Both modes from identical data; the rescaled run takes its boundary value from the cylindrical one."""
    p = replace(P5, T=math.exp(-1.0))
    data = flow.condition_ii_data(p)
    tip = p.A * p.T ** (-p.gamma)
    s = np.arange(tip - 8.0, 45.0, 0.0125)
    s_max = float(s[-1])
    cyl = flow.FlowState("cylindrical-st", 0.0, s, data(s),
                         flow.Boundary(2.0, "dirichlet", right_value=lambda t: p.cyl * (p.T - t - p.A / s_max)))
    xi = flow.uniform_grid(-8.0, 12.0, 801)
    edge = {"value": 0.0}
    res = flow.FlowState("rescaled-xitau", 1.0, xi, data.rescaled(xi),
                         flow.Boundary(2.0, "dirichlet", right_value=lambda tau: edge["value"]))
    dtau, sub = 1e-3, 4
    worst = 0.0
    for k in range(1, 2001):
        tau_new = 1.0 + k * dtau
        t_new = p.T - math.exp(-tau_new)
        t_old = cyl.time
        for _ in range(sub):
            cyl = flow.step(cyl, (t_new - t_old) / sub, p)
        spline = CubicSpline(cyl.grid, cyl.values)
        edge["value"] = math.exp(2 * tau_new) * float(spline(p.A * math.exp(tau_new) + xi[-1]))
        res = flow.step(res, tau_new - res.time, p)
        if k % 250 == 0:
            ref = math.exp(2 * res.time) * spline(p.A * math.exp(res.time) + xi)
            worst = max(worst, float(np.max(np.abs(res.values - ref) / ref)))
    assert res.time == pytest.approx(3.0)
    assert worst <= 5e-3
