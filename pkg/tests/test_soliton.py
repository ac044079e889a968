import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yamabe_typeii import residual
from yamabe_typeii import soliton as sol
from yamabe_typeii.coords import make_params

P5 = make_params(5)


@pytest.fixture(scope="module")
def prof():
    return sol.solve_soliton(P5)


def test_translation_is_normalized(prof):
    assert abs(prof.kappa_residual) <= 1e-6
    assert 50.0 * (sol.eval(prof, 50.0) - 12.0 * 50.0) == pytest.approx(-1.0, rel=0.05)


def test_table_satisfies_profile_ode(prof):
    xi = np.linspace(-8.0, 40.0, 20001)
    assert np.max(np.abs(prof.ode_residual(xi))) <= 1e-8
    nodes = prof.table[:, 0]
    assert np.max(np.abs(prof.ode_residual(nodes))) <= 1e-8
    with pytest.raises(ValueError):
        prof.ode_residual(np.array([prof.xi_max + 1.0]))


def test_profile_is_increasing_with_smooth_origin_and_linear_tail(prof):
    xi = np.linspace(-20.0, 100.0, 5000)
    w, dw, _ = prof.derivs(xi)
    assert np.all(w > 0) and np.all(dw > 0)
    left = np.array([-15.0, -12.0])
    assert np.allclose(sol.eval(prof, left) / np.exp(2 * left), prof.b0_effective, rtol=1e-9)
    assert sol.eval_d1(prof, 100.0) == pytest.approx(12.0, rel=1e-3)


def test_pieces_join_continuously_at_table_ends(prof):
    for edge in (prof.xi_min, prof.xi_max):
        inside = prof.derivs(np.array([edge - 1e-9 if edge == prof.xi_max else edge + 1e-9]))
        outside = prof.derivs(np.array([edge + 1e-9 if edge == prof.xi_max else edge - 1e-9]))
        for a, b in zip(inside[:2], outside[:2]):
            assert a[0] == pytest.approx(b[0], rel=1e-7)


def test_second_derivative_agrees_with_difference_of_first(prof):
    xi = np.linspace(-6.0, 30.0, 101)
    h = 1e-4
    fd = (sol.eval_d1(prof, xi + h) - sol.eval_d1(prof, xi - h)) / (2 * h)
    assert np.allclose(sol.eval_d2(prof, xi), fd, rtol=1e-6, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(value=st.floats(1e-6, 1e3))
def test_invert_recovers_the_level(prof, value):
    xi = sol.invert(prof, value)
    assert sol.eval(prof, xi) == pytest.approx(value, rel=1e-10)


def test_invert_rejects_non_positive_levels(prof):
    with pytest.raises(ValueError):
        sol.invert(prof, np.array([1.0, 0.0]))


def test_solve_rejects_short_domains():
    with pytest.raises(ValueError):
        sol.solve_soliton(P5, xi_min=-5.0)
    with pytest.raises(ValueError):
        sol.solve_soliton(P5, xi_max=20.0)


def test_normalized_profile_is_seed_independent(prof):
    other = sol.solve_soliton(P5, b0=4.0)
    xi = np.linspace(-5.0, 20.0, 1001)
    assert np.max(np.abs(sol.eval(other, xi) - sol.eval(prof, xi))) <= 1e-8


def test_normalized_profile_is_insensitive_to_seed_location(prof):
    deeper = sol.solve_soliton(P5, xi_min=-20.0)
    xi = np.linspace(-5.0, 20.0, 1001)
    assert np.max(np.abs(sol.eval(deeper, xi) - sol.eval(prof, xi))) <= 1e-9 * 12 * 20


@pytest.mark.parametrize(("n", "A"), [(4, 1.0), (5, 1.0), (6, 1.0), (5, 2.0)])
def test_origin_curvature_equals_twice_speed(n, A):
    p = make_params(n, A=A)
    r0 = sol.soliton_curvature_max(sol.solve_soliton(p))
    assert r0 == pytest.approx(2 * p.speed, rel=1e-3)


def test_origin_norm_convention(prof):
    field = sol.soliton_curvature(prof, np.linspace(0.0, 0.2, 201))
    assert field.rmNorm[0] == pytest.approx(2 / math.sqrt(20), rel=1e-3)


def test_curvature_is_maximal_at_origin(prof):
    y = np.linspace(0.0, 20.0, 4001)
    R = sol.soliton_curvature(prof, y).R
    assert np.all(R[1:] < R[0])


def test_traveling_wave_solves_cylindrical_equation(prof):
    def wave(s, t):
        return sol.eval(prof, s - P5.speed * t)

    s, t = np.meshgrid(np.linspace(-5.0, 10.0, 61), np.linspace(0.0, 1.0, 5))
    value, gap = residual.cyl_residual(wave, s, t, P5)
    assert np.max(np.abs(value)) <= 1e-7
    assert np.max(gap) < 1e-3


def test_summary_fields(prof):
    summ = sol.summary(prof)
    assert {"kappa_residual", "R_origin", "b0_effective"} <= set(summ)
