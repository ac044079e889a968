import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from yamabe_typeii import outer
from yamabe_typeii.coords import make_params

P5 = make_params(5)


@pytest.fixture(scope="module")
def tables():
    return outer.build_w1(P5), outer.build_w2(P5)


def test_zero_order_profile_closed_form():
    eta = np.geomspace(1.0 + 1e-9, 1e4, 500)
    for gamma in (1.0, 0.4, 2.0):
        p = make_params(5, gamma=gamma, A=1.5)
        x = 1.5 * eta
        q = eta ** (-1 / gamma)
        assert np.allclose(outer.what0(x, p), 12 * (1 - q), rtol=1e-12, atol=1e-14)
        assert np.allclose(outer.what0_d1(x, p), 12 * q / (gamma * x), rtol=1e-12)
        assert np.allclose(outer.what0_d2(x, p), -12 * (1 + 1 / gamma) * q / (gamma * x**2), rtol=1e-12)


def test_zero_order_profile_keeps_relative_accuracy_near_tip():
    d = np.array([1e-14, 1e-10, 1e-6])
    w = outer.what0_d(d, P5)[0]
    assert np.allclose(w, 12 * d / (1 + d), rtol=1e-12)


def test_outer_functions_refuse_points_at_or_below_tip(tables):
    with pytest.raises(outer.OuterDomainError):
        outer.what0(np.array([1.0]), P5)
    with pytest.raises(outer.OuterDomainError):
        tables[0](np.array([0.5]))
    with pytest.raises(outer.OuterDomainError):
        tables[0](np.array([tables[0].eta_max * 2]))


def test_first_correction_matches_direct_quadrature(tables):
    w1 = tables[0]
    assert w1.anchor == pytest.approx(2.0)

    def oracle(eta):
        val, _ = integrate.quad(lambda s: s**2 * outer.f1(np.array([s]), P5)[0], 2.0, eta,
                                epsabs=0, epsrel=1e-13, limit=200)
        return val / eta**3

    for eta in (1.05, 1.3, 2.0, 3.7, 10.0, 55.0):
        assert w1(np.array([eta]))[0] == pytest.approx(oracle(eta), rel=1e-9, abs=1e-14)


def test_second_correction_matches_closed_form(tables):
    eta = 1.0 + np.geomspace(0.01, 99.0, 1500)
    assert np.max(np.abs(tables[1](eta) / (4 / (eta**3 * (eta - 1))) - 1)) <= 1e-9


@pytest.mark.parametrize("gamma", [1.0, 0.4])
def test_correction_tables_satisfy_their_ode(gamma):
    p = make_params(5, gamma=gamma)
    eta = np.geomspace(1.01, 100.0, 800)
    srcs = (outer.f1(eta, p), outer.f2(eta, p))
    for tab, f in zip((outer.build_w1(p), outer.build_w2(p)), srcs):
        assert np.max(np.abs(tab.residual(eta)) / (1 + np.abs(f))) <= 1e-8


def test_correction_order_and_activation():
    assert outer.correction_order(0.4) == 2
    assert outer.correction_order(0.2) == 3
    assert outer.outer_ansatz(P5, P5.theta_plus).corrections == {} or all(
        c == 0 for c in outer.outer_ansatz(P5, P5.theta_plus).corrections.values())
    p = make_params(5, gamma=0.4)
    corr = outer.outer_ansatz(p, p.theta_plus).corrections
    assert any(c != 0 for c in corr.values())
    assert all(l != 0 or c == 0 for (k, l), c in corr.items())


@settings(max_examples=80, deadline=None)
@given(d=st.floats(1e-8, 1e3), tau=st.floats(0.0, 40.0))
def test_candidates_are_strictly_ordered_in_theta(d, tau):
    dd, tt = np.array([d]), np.array([tau])
    parts = [outer.outer_ansatz(P5, th).pieces_d(dd, tt).delta[0] for th in (P5.theta_minus, 0.0, P5.theta_plus)]
    assert parts[0] < parts[1] < parts[2]
    vals = [outer.what_pm(1.0 + dd, tt, P5, th)[0] for th in (P5.theta_minus, 0.0, P5.theta_plus)]
    assert vals[0] <= vals[1] <= vals[2]


def test_corrections_decay_at_twice_the_rescaling_rate():
    eta = np.geomspace(1.01, 100.0, 50)
    base = outer.what0(eta, P5)
    gaps = [np.max(np.abs(outer.what_pm(eta, tau, P5, P5.theta_plus) - base)) for tau in (2.0, 4.0, 6.0)]
    assert gaps[0] / gaps[1] == pytest.approx(math.exp(4.0), rel=1e-6)
    assert gaps[1] / gaps[2] == pytest.approx(math.exp(4.0), rel=1e-6)


@pytest.mark.parametrize("theta", [0.25, -0.75])
def test_rescaled_candidate_approaches_linear_law_near_tip(theta):
    ans = outer.outer_ansatz(P5, theta)
    xi1 = 2.0
    errs = []
    for tau in (8.0, 12.0, 16.0):
        et = math.exp(-tau)
        val = ans.pieces_d(np.array([xi1 * et]), np.array([tau])).w[0] / et
        errs.append(abs(val - (12 * xi1 + 4 * theta / xi1)))
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-3


def test_anchor_constants_are_recorded():
    consts = outer.lemma_constants(P5, P5.theta_plus)
    assert set(consts) == {"C", "C_pp", "v21_coefficient_fit", "fit_rel_residual"}
    assert all(math.isfinite(v) for v in consts.values())
