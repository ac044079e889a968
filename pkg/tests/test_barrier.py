import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yamabe_typeii import barrier as bar
from yamabe_typeii import residual
from yamabe_typeii import soliton as sol
from yamabe_typeii.coords import make_params

P5 = make_params(5)


@pytest.fixture(scope="module")
def b():
    return bar.assemble(P5, eps=0.05, xi0=1.4, xi1=1.4, tau0=5.0, tau1=6.0)


def test_inner_pieces_scale_the_soliton(b):
    xi = np.linspace(-8.0, 1.4, 50)
    prof = b.soliton
    assert np.allclose(bar.inner_pm(prof, xi, "+", 0.3, 0.0), sol.eval(prof, xi + 0.3), rtol=1e-15)
    ratio = bar.inner_pm(prof, xi, "-", 0.3, 0.05) / bar.inner_pm(prof, xi, "+", 0.3, 0.05)
    assert np.allclose(ratio, 1.05 / 0.95, rtol=1e-14)
    with pytest.raises(ValueError):
        bar.inner_pm(prof, xi, "x", 0.3, 0.05)


def test_glue_relation_holds_on_the_shift_table(b):
    et = np.exp(-b.tau_grid)
    for side, C in (("+", b.C1tab), ("-", b.C2tab)):
        s = 1 if side == "+" else -1
        outer_val = b.outer(side).pieces_d(b.xi1 * et, b.tau_grid).w / et
        left = sol.eval(b.soliton, b.xi1 + C)
        assert np.max(np.abs(left - (1 + s * b.eps) * outer_val)) <= 1e-10 * np.max(np.abs(left))


def test_direct_shifts_match_the_tabulated_ones(b):
    C1, _ = b.shift(b.tau_grid, "+")
    C2, _ = b.shift(b.tau_grid, "-")
    assert np.allclose(C1, b.C1tab, rtol=0, atol=1e-11)
    assert np.allclose(C2, b.C2tab, rtol=0, atol=1e-11)


def test_shift_functions_are_ordered_and_settle(b):
    assert np.all(b.C1tab > b.C2tab)
    tmax = b.tau_grid[-1]
    for side in ("+", "-"):
        C = b.shift(np.array([tmax, tmax / 1.5]), side)[0]
        assert abs(C[0] - C[1]) <= 1e-3


def test_shift_derivative_matches_difference_quotient(b):
    tau = np.linspace(6.5, 20.0, 12)
    h = 1e-4
    for side in ("+", "-"):
        _, Cp = b.shift(tau, side)
        fd = (b.shift(tau + h, side)[0] - b.shift(tau - h, side)[0]) / (2 * h)
        assert np.allclose(Cp, fd, rtol=1e-5, atol=1e-10)


def test_inner_branch_derivatives_agree_with_differences(b):
    rng = np.random.default_rng(5)
    xi = rng.uniform(-8.0, b.xi1, 1000)
    tau = rng.uniform(b.tau1, b.tau1 + 8.0, 1000)
    for side in ("+", "-"):
        branch = b.inner_branch(side)
        exact = branch.derivs(xi, tau)
        fd, err = residual.fd_derivatives(lambda x, t: branch.derivs(x, t)[0], xi, tau, hx=1e-3, ht=1e-3)
        for k in (1, 2, 3):
            assert np.all(np.abs(fd[k] - exact[k]) <= err + 1e-8 * (1 + np.abs(exact[k])))


def test_branches_meet_continuously(b):
    rep = bar.check_prop61(b, scans=False)
    assert rep.continuity_gap <= 1e-10
    tau = np.linspace(b.tau1, b.tau1 + 8.0, 9)
    for side in ("+", "-"):
        left = b.composite(np.full_like(tau, b.xi1), tau, side)
        right = b.composite(np.full_like(tau, b.xi1 * (1 + 1e-12)), tau, side)
        assert np.allclose(left, right, rtol=1e-9)


def test_random_samples_are_ordered(b):
    rng = np.random.default_rng(20240101)
    xi = rng.uniform(-10.0, 100.0, 10_000)
    tau = rng.uniform(b.tau1, b.tau1 + 8.0, 10_000)
    up, lo = b.composite(xi, tau, "+"), b.composite(xi, tau, "-")
    assert np.all(lo > 0) and np.all(up > lo)


@settings(max_examples=60, deadline=None)
@given(xi=st.floats(-12.0, 500.0), dtau=st.floats(0.0, 12.0))
def test_ordering_holds_everywhere(b, xi, dtau):
    tau = b.tau1 + dtau
    assert b.composite(xi, tau, "+") > b.composite(xi, tau, "-") > 0


def test_barriers_have_smooth_origin_decay(b):
    xi = np.array([-14.0, -12.0, -10.0])
    for side in ("+", "-"):
        ratio = b.composite(xi, b.tau1 + 2.0, side) / np.exp(2 * xi)
        assert np.allclose(ratio, ratio[0], rtol=1e-5)


def test_certification_of_fixed_configuration(b):
    rep = bar.check_prop61(b)
    assert rep.ok, rep.violations
    assert set(rep.scans) == {"B+", "B-", "I+", "I-"}
    assert rep.ordering_margin > 0 and rep.positivity_margin > 0
    assert rep.jump_margin_plus > 0 and rep.jump_margin_minus > 0
    assert rep.to_dict()["ok"] is True


def test_swapping_sides_is_reported(b):
    rep = bar.check_prop61(b, swap=True)
    assert not rep.ok
    assert any("ordering" in v for v in rep.violations)
    assert any(len(s.violations) > 0 for s in rep.scans.values())


def test_zero_gap_jump_margins_approach_the_theta_gap():
    gaps = []
    for xi1 in (1.4, 3.0):
        b0 = bar.assemble(P5, eps=0.0, xi0=1.4, xi1=xi1, tau0=5.0, tau1=8.0)
        be = bar.assemble(P5, eps=0.05, xi0=1.4, xi1=xi1, tau0=5.0, tau1=8.0)
        r0, re = bar.check_prop61(b0, scans=False), bar.check_prop61(be, scans=False)
        total = r0.jump_margin_plus + r0.jump_margin_minus
        predicted = (P5.theta_plus - P5.theta_minus) * (P5.n - 1) / (P5.speed * xi1**2) / P5.slope
        assert r0.jump_margin_plus > 0 and r0.jump_margin_minus > 0
        assert total == pytest.approx(predicted, rel=0.15)
        assert re.jump_margin_plus < r0.jump_margin_plus and re.jump_margin_minus < r0.jump_margin_minus
        gaps.append(total)
    assert gaps[1] < gaps[0]


def test_zero_shift_view_is_identical(b):
    xi = np.linspace(-10.0, 40.0, 300)
    for side in ("+", "-"):
        assert np.array_equal(bar.shifted(b, 0.0).composite(xi, 7.0, side), b.composite(xi, 7.0, side))


def test_shifted_view_translates_and_lowers_supersolution(b):
    xi = np.linspace(-8.0, 30.0, 300)
    moved = bar.shifted(b, 0.5)
    assert np.allclose(moved.composite(xi, 7.0, "+"), b.composite(xi - 0.5 * P5.speed, 7.0, "+"), rtol=1e-14)
    assert np.all(moved.composite(xi, 7.0, "+") < b.composite(xi, 7.0, "+"))
    assert bar.shifted(moved, -0.5).shift_offset == 0.0


def test_assemble_validates_inputs():
    with pytest.raises(ValueError):
        bar.assemble(P5, eps=1.5, xi0=1.4, xi1=1.4, tau0=5.0)
    with pytest.raises(ValueError):
        bar.assemble(P5, eps=0.05, xi0=1.4, xi1=1.4, tau0=5.0, tau1=4.0)
    with pytest.raises(bar.GlueError):
        bar.solve_glue(np.array([1.0]), "-", P5, xi1=0.1, eps=0.05)


def test_shift_table_csv(b):
    text = b.shift_table_csv().splitlines()
    assert text[0].startswith("# ") and text[1] == "tau,C1,C2"
    assert len(text) == 2 + b.tau_grid.size
    tau, c1, c2 = map(float, text[2].split(","))
    assert tau == b.tau_grid[0] and c1 == b.C1tab[0] and c2 == b.C2tab[0]


def test_corridor_requires_late_enough_start(b):
    assert bar.corridor_ok(b, 12.0, np.linspace(6.0, 14.0, 9))
    assert not bar.corridor_ok(b, 12.0, np.array([4.0]))


def test_default_grid_straddles_the_junction(b):
    grid = bar.default_xi_grid(b)
    assert grid[0] == -10.0 and grid[-1] == pytest.approx(1e3) and b.xi1 in grid
    assert np.all(np.diff(grid) > 0)


def test_auto_tune_records_its_search():
    res = bar.auto_tune(P5, eps=0.05, corridor_xi=12.0)
    assert res.ok
    t = res.barrier.tuning()
    assert t["tau1"] >= t["tau0"] and t["xi1"] >= t["xi0"]
    assert res.barrier.meta["corridor_xi"] == 12.0 and res.tried
    assert bar.corridor_ok(res.barrier, 12.0, np.linspace(t["tau1"], t["tau1"] + 8.0, 17))
    assert math.isfinite(res.report.jump_margin_plus)
