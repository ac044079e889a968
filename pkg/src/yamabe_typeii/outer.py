"""Outer-region ansatz and its barrier corrections.

The transport profile ``what0(eta) = (n-1)(n-2)[1 - (eta/A)^{-1/gamma}]`` is
corrected at order ``e^{-2 gamma tau}`` by ``h = w1 + theta w2`` where

    gamma eta wi' + (1 + 2 gamma) wi = fi,   i = 1, 2.

``w1`` and ``w2`` are tabulated once per parameter set by adaptive quadrature
and evaluated by quintic Hermite interpolation in ``x = ln(eta - A)``.  Every
function here also accepts the offset ``d = eta - A`` directly; inside the
inner region ``d`` is of order ``e^{-gamma tau}`` and forming ``A + d`` first
would throw away most of its digits.

For ``gamma <= 1/2`` the correction family ``v_{k,l} = eta^{-2k-1/gamma}
(ln eta)^l`` removes the slowly decaying far-field error of ``h``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import quad, quad_vec
from scipy.interpolate import BPoly

from .coords import FlowParams

FloatArray = NDArray[np.float64]

DEFAULT_D_MIN = 1e-12


class OuterDomainError(ValueError):
    """Raised for eta <= A or eta beyond the tabulated range."""


def _offset(eta: ArrayLike, params: FlowParams) -> FloatArray:
    d = np.asarray(eta, dtype=float) - params.A
    if np.any(d <= 0):
        raise OuterDomainError("outer functions are defined only for eta > A")
    return d


def _ratio_power(d: FloatArray, params: FlowParams) -> FloatArray:
    """``(eta/A)^{-1/gamma}`` from the offset."""
    return np.exp(-np.log1p(d / params.A) / params.gamma)


def _one_minus_ratio(d: FloatArray, params: FlowParams) -> FloatArray:
    """``1 - (eta/A)^{-1/gamma}`` without cancellation near eta = A."""
    return -np.expm1(-np.log1p(d / params.A) / params.gamma)


# ---------------------------------------------------------------------------
# zero-order profile and source terms


def what0_d(d: ArrayLike, params: FlowParams) -> tuple[FloatArray, FloatArray, FloatArray]:
    """``what0`` and its first two eta-derivatives at offset ``d = eta - A``."""
    d = np.asarray(d, dtype=float)
    g = params.gamma
    eta = params.A + d
    q = _ratio_power(d, params)
    w = params.cyl * _one_minus_ratio(d, params)
    w1 = params.cyl / g * q / eta
    w2 = -params.cyl / g * (1.0 + 1.0 / g) * q / eta**2
    return w, w1, w2


def what0(eta: ArrayLike, params: FlowParams) -> FloatArray:
    return what0_d(_offset(eta, params), params)[0]


def what0_d1(eta: ArrayLike, params: FlowParams) -> FloatArray:
    return what0_d(_offset(eta, params), params)[1]


def what0_d2(eta: ArrayLike, params: FlowParams) -> FloatArray:
    return what0_d(_offset(eta, params), params)[2]


def _sources(d: FloatArray, params: FlowParams) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """``f1, f1', f2, f2'`` at offset ``d``."""
    n, g = params.n, params.gamma
    eta = params.A + d
    a = params.A ** (-1.0 / g)
    D = a * _one_minus_ratio(d, params)  # A^{-1/g} - eta^{-1/g}
    Dp = eta ** (-1.0 / g - 1.0) / g
    k1 = (n - 1) * (1 + g) / g**2
    k2 = (n - 1) / g**2
    p1 = eta ** (-1.0 / g - 2.0)
    p2 = eta ** (-2.0 / g - 2.0)
    f1 = k1 * p1 / D
    f1p = k1 * ((-1.0 / g - 2.0) * p1 / eta / D - p1 * Dp / D**2)
    f2 = -k2 * p2 / D**2
    f2p = -k2 * ((-2.0 / g - 2.0) * p2 / eta / D**2 - 2.0 * p2 * Dp / D**3)
    return f1, f1p, f2, f2p


def f1(eta: ArrayLike, params: FlowParams) -> FloatArray:
    return _sources(_offset(eta, params), params)[0]


def f2(eta: ArrayLike, params: FlowParams) -> FloatArray:
    return _sources(_offset(eta, params), params)[2]


# ---------------------------------------------------------------------------
# v_{k,l} family


def vkl(k: int, l: int, eta: ArrayLike, gamma: float) -> tuple[FloatArray, FloatArray, FloatArray]:
    """``eta^{-2k-1/gamma} (ln eta)^l`` and two derivatives; ``l = -1`` gives 0."""
    if k < 2 or l < -1 or l > k:
        raise ValueError(f"index out of range: k={k}, l={l}")
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ValueError("v_{k,l} needs eta > 0")
    if l == -1:
        zero = np.zeros_like(eta)
        return zero, zero.copy(), zero.copy()
    p = 2 * k + 1.0 / gamma
    L = np.log(eta)

    def lp(j: int) -> FloatArray:
        return L**j if j >= 0 else np.zeros_like(L)

    base = eta ** (-p)
    v = base * lp(l)
    v1 = base / eta * (-p * lp(l) + l * lp(l - 1))
    v2 = base / eta**2 * (p * (p + 1) * lp(l) - (2 * p + 1) * l * lp(l - 1) + l * (l - 1) * lp(l - 2))
    return v, v1, v2


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class CorrectionTable:
    """Quadrature table of one correction profile on ``(A + d_min, eta_max]``."""

    which: int
    params: FlowParams
    x: FloatArray  # ln(eta - A)
    values: FloatArray
    interval_error: float
    tail: float
    tail_bound: float
    anchor: float
    tol: float
    _poly: BPoly = field(repr=False, compare=False)

    @property
    def eta_min(self) -> float:
        return self.params.A + math.exp(self.x[0])

    @property
    def eta_max(self) -> float:
        return self.params.A + math.exp(self.x[-1])

    def derivs_d(self, d: ArrayLike) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Value and ODE-identity derivatives at offsets ``d``."""
        d = np.asarray(d, dtype=float)
        x = np.log(d)
        lo, hi = self.x[0], self.x[-1]
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise OuterDomainError(
                f"eta outside the tabulated range [{self.eta_min:.6g}, {self.eta_max:.6g}]"
            )
        w = self._poly(np.clip(x, lo, hi))
        return _ode_derivs(self.which, d, w, self.params)

    def __call__(self, eta: ArrayLike) -> FloatArray:
        return self.derivs_d(_offset(eta, self.params))[0]

    def residual(self, eta: ArrayLike) -> FloatArray:
        """``gamma eta w' + (1+2 gamma) w - f`` with ``w'`` from the interpolant."""
        d = _offset(eta, self.params)
        x = np.log(d)
        w = self._poly(x)
        dw = self._poly.derivative()(x) / d
        f = _sources(d, self.params)[0 if self.which == 1 else 2]
        g = self.params.gamma
        return g * (self.params.A + d) * dw + (1 + 2 * g) * w - f


def _ode_derivs(which: int, d: FloatArray, w: FloatArray, params: FlowParams):
    g = params.gamma
    eta = params.A + d
    f1_, f1p, f2_, f2p = _sources(d, params)
    f, fp = (f1_, f1p) if which == 1 else (f2_, f2p)
    w1 = (f - (1 + 2 * g) * w) / (g * eta)
    w2 = (fp - (1 + 3 * g) * w1) / (g * eta)
    return w, w1, w2


def _integrand(which: int, d: FloatArray, params: FlowParams) -> FloatArray:
    """``f_i(eta) eta^{1+1/gamma} / gamma``."""
    g = params.gamma
    f = _sources(d, params)[0 if which == 1 else 2]
    return f * (params.A + d) ** (1.0 + 1.0 / g) / g


def _piecewise_integrals(which: int, x: FloatArray, params: FlowParams, tol: float) -> tuple[FloatArray, float]:
    """Integrals of the source over each ``[x_j, x_{j+1}]`` (variable ``x = ln d``)."""
    x0, dx = x[:-1], np.diff(x)

    def h(t: float) -> FloatArray:
        xs = x0 + t * dx
        d = np.exp(xs)
        return _integrand(which, d, params) * d * dx

    pieces, err = quad_vec(h, 0.0, 1.0, epsrel=tol, epsabs=0.0, norm="max")
    return np.asarray(pieces), float(err)


def _build(which: int, params: FlowParams, eta_max: float | None, tol: float, step: float,
           d_min: float) -> CorrectionTable:
    if tol <= 0:
        raise ValueError("tol must be positive")
    A, g = params.A, params.gamma
    eta_max = 1e5 * A if eta_max is None else float(eta_max)
    if eta_max <= 2 * A:
        raise ValueError("eta_max must exceed 2A")
    lo, hi = math.log(d_min * A), math.log(eta_max - A)
    x = np.linspace(lo, hi, int(math.ceil((hi - lo) / step)) + 1)
    anchor_x = math.log(A)  # eta0 = 2A  <=>  d = A
    if which == 1:
        x = np.union1d(x, [anchor_x])
    pieces, err = _piecewise_integrals(which, x, params, tol)
    eta = A + np.exp(x)
    scale = eta ** (-2.0 - 1.0 / g)
    tail = 0.0
    bound = 0.0
    if which == 2:
        # integral from eta_max to infinity; f2 ~ -(n-1)/g^2 A^{2/g} x^{-2/g-2}
        # substitute x = eta_max y^{-gamma}: the integrand becomes smooth on (0, 1]
        def tail_integrand(y: float) -> float:
            xv = eta_max * y ** (-g)
            return float(_integrand(2, np.array([xv - A]), params)[0] * g * xv / y)

        tail, qerr = quad(tail_integrand, 0.0, 1.0, epsrel=max(tol, 1e-13), epsabs=0.0, limit=200)
        bound = (params.n - 1) / g**2 * A ** (2.0 / g) * eta_max ** (-1.0 / g)
        if qerr > max(tol, 1e-13) * abs(tail) + 1e-300:
            raise RuntimeError(f"tail quadrature for w2 did not reach tol={tol}")
        upper = tail + np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
        values = -scale * upper
    else:
        cum = np.concatenate([[0.0], np.cumsum(pieces)])
        j = int(np.searchsorted(x, anchor_x))
        values = scale * (cum - cum[j])
    d = np.exp(x)
    w, w1, w2 = _ode_derivs(which, d, values, params)
    poly = BPoly.from_derivatives(x, np.column_stack([w, d * w1, d * w1 + d**2 * w2]))
    if which == 2 and not np.all(values > 0):
        raise RuntimeError("w2 table lost positivity; tolerance too loose")
    return CorrectionTable(which, params, x, values, err, float(tail), float(bound), 2 * A, tol, poly)


@functools.lru_cache(maxsize=32)
def build_w2(params: FlowParams, eta_max: float | None = None, tol: float = 1e-12,
             step: float = 0.01, d_min: float = DEFAULT_D_MIN) -> CorrectionTable:
    """``w2(eta) = -eta^{-2-1/gamma} int_eta^inf f2(x) x^{1+1/gamma}/gamma dx``."""
    return _build(2, params, eta_max, tol, step, d_min)


@functools.lru_cache(maxsize=32)
def build_w1(params: FlowParams, eta_max: float | None = None, tol: float = 1e-12,
             step: float = 0.01, d_min: float = DEFAULT_D_MIN) -> CorrectionTable:
    """``w1(eta) = eta^{-2-1/gamma} int_{2A}^eta f1(x) x^{1+1/gamma}/gamma dx``."""
    return _build(1, params, eta_max, tol, step, d_min)


# ---------------------------------------------------------------------------
# corrections for gamma <= 1/2


def correction_order(gamma: float) -> int:
    return int(math.floor(1.0 / (2.0 * gamma))) + 1


def hhat_leading(params: FlowParams) -> float:
    """Coefficient of ``v_{2,1}`` in the large-eta expansion of ``h''``."""
    n, g, A = params.n, params.gamma, params.A
    return (n - 1) * A ** (1.0 / g) * (1 + g) * (1 + 2 * g) * (1 + 3 * g) / g**5


def fit_hhat_second_derivative(params: FlowParams, theta: float, w1: CorrectionTable,
                               w2: CorrectionTable, samples: int = 200) -> tuple[float, float, float]:
    """Least-squares fit of ``h'' ~ K v21 + C'' v20`` on ``[1e2 A, 1e4 A]``.

    Returns ``(K_fit, C'', relative rms residual)``.  Rows are weighted by
    ``1/v21`` so both ends of the window count equally.
    """
    g = params.gamma
    eta = np.geomspace(1e2 * params.A, 1e4 * params.A, samples)
    d = eta - params.A
    h2 = w1.derivs_d(d)[2] + theta * w2.derivs_d(d)[2]
    v21 = vkl(2, 1, eta, g)[0]
    v20 = vkl(2, 0, eta, g)[0]
    basis = np.column_stack([v21, v20]) / v21[:, None]
    rhs = h2 / v21
    coef, *_ = np.linalg.lstsq(basis, rhs, rcond=None)
    resid = basis @ coef - rhs
    rel = float(np.sqrt(np.mean(resid**2)) / np.sqrt(np.mean(rhs**2)))
    return float(coef[0]), float(coef[1]), rel


def correction_coeffs(params: FlowParams, theta: float, w1: CorrectionTable | None = None,
                      w2: CorrectionTable | None = None, fit_tol: float = 1e-4) -> dict[tuple[int, int], float]:
    """Coefficients ``c_{k,l}`` for ``k = 2..N``, ``l = 0..k`` with ``c_{k,0} = 0``.

    Level 2 cancels ``h''/(n-2)`` against ``sum_l gamma l c_{2,l} v_{2,l-1}``.
    Level ``k >= 3`` cancels the second derivatives of level ``k-1``, which
    expand over ``v_{k,l}, v_{k,l-1}, v_{k,l-2}``.
    """
    g = params.gamma
    if g > 0.5:
        return {}
    w1 = build_w1(params) if w1 is None else w1
    w2 = build_w2(params) if w2 is None else w2
    K, Cpp, rel = fit_hhat_second_derivative(params, theta, w1, w2)
    lead = hhat_leading(params)
    if rel > fit_tol or abs(K - lead) > 1e-3 * abs(lead):
        raise RuntimeError(
            f"far-field fit of h'' failed (rel residual {rel:.2e}, K={K:.6g} vs {lead:.6g}); "
            "increase eta_max"
        )
    # with the leading coefficient pinned to its analytic value, refit C'' alone
    eta = np.geomspace(1e2 * params.A, 1e4 * params.A, 200)
    d = eta - params.A
    h2 = w1.derivs_d(d)[2] + theta * w2.derivs_d(d)[2]
    v21, v20 = vkl(2, 1, eta, g)[0], vkl(2, 0, eta, g)[0]
    Cpp = float(np.sum((h2 - lead * v21) / v21 * (v20 / v21)) / np.sum((v20 / v21) ** 2))
    N = correction_order(g)
    nm2 = params.n - 2
    c: dict[tuple[int, int], float] = {}
    # level 2: coefficient of v_{2,j} in h'' is [C'', lead][j]
    hcoef = [Cpp, lead]
    c[(2, 0)] = 0.0
    for j in range(2):
        c[(2, j + 1)] = -hcoef[j] / (nm2 * g * (j + 1))
    for k in range(3, N + 1):
        p = 2 * (k - 1) + 1.0 / g
        P, Q = p * (p + 1), 2 * p + 1
        prev = lambda l: c.get((k - 1, l), 0.0)  # noqa: E731
        c[(k, 0)] = 0.0
        for j in range(k):
            src = P * prev(j) - Q * (j + 1) * prev(j + 1) + (j + 2) * (j + 1) * prev(j + 2)
            c[(k, j + 1)] = -src / (nm2 * g * (j + 1))
    return c


# ---------------------------------------------------------------------------
# assembled barrier candidate


@dataclass(frozen=True)
class OuterPieces:
    """Pieces of ``what = what0 + delta`` at a batch of points, with derivatives.

    ``source`` is ``sum_k e^{-2k gamma tau} sum_l gamma l c_{k,l} v_{k,l-1}``,
    the part of the linear transport operator not cancelled exactly.
    """

    w0: FloatArray
    w0p: FloatArray
    w0pp: FloatArray
    delta: FloatArray
    deltap: FloatArray
    deltapp: FloatArray
    dtau: FloatArray
    source: FloatArray

    @property
    def w(self) -> FloatArray:
        return self.w0 + self.delta

    @property
    def wp(self) -> FloatArray:
        return self.w0p + self.deltap

    @property
    def wpp(self) -> FloatArray:
        return self.w0pp + self.deltapp


@dataclass(frozen=True)
class OuterAnsatz:
    params: FlowParams
    theta: float
    w1tab: CorrectionTable
    w2tab: CorrectionTable
    corrections: dict[tuple[int, int], float]

    @property
    def eta0(self) -> float:
        return self.w1tab.anchor

    @property
    def N(self) -> int:
        return correction_order(self.params.gamma) if self.corrections else 0

    def pieces_d(self, d: ArrayLike, tau: ArrayLike) -> OuterPieces:
        d, tau = np.broadcast_arrays(np.asarray(d, dtype=float), np.asarray(tau, dtype=float))
        if np.any(d <= 0):
            raise OuterDomainError("outer functions are defined only for eta > A")
        g = self.params.gamma
        w0, w0p, w0pp = what0_d(d, self.params)
        a1, a1p, a1pp = self.w1tab.derivs_d(d)
        b1, b1p, b1pp = self.w2tab.derivs_d(d)
        e2 = np.exp(-2 * g * tau)
        h, hp, hpp = a1 + self.theta * b1, a1p + self.theta * b1p, a1pp + self.theta * b1pp
        delta, deltap, deltapp = e2 * h, e2 * hp, e2 * hpp
        dtau = -2 * g * e2 * h
        source = np.zeros_like(d)
        if self.corrections:
            eta = self.params.A + d
            for (k, l), c in self.corrections.items():
                if c == 0.0:
                    continue
                ek = np.exp(-2 * k * g * tau)
                v, vp, vpp = vkl(k, l, eta, g)
                delta = delta + c * ek * v
                deltap = deltap + c * ek * vp
                deltapp = deltapp + c * ek * vpp
                dtau = dtau - 2 * k * g * c * ek * v
                source = source + ek * g * l * c * vkl(k, l - 1, eta, g)[0]
        return OuterPieces(w0, w0p, w0pp, delta, deltap, deltapp, dtau, source)

    def derivs_d(self, d: ArrayLike, tau: ArrayLike) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
        """``(what, what_eta, what_etaeta, what_tau)`` at offsets ``d``."""
        p = self.pieces_d(d, tau)
        return p.w, p.wp, p.wpp, p.w0 * 0.0 + p.dtau

    def __call__(self, eta: ArrayLike, tau: ArrayLike) -> FloatArray:
        return self.pieces_d(_offset(eta, self.params), tau).w


@functools.lru_cache(maxsize=32)
def outer_ansatz(params: FlowParams, theta: float, eta_max: float | None = None,
                 tol: float = 1e-12) -> OuterAnsatz:
    """Build (and cache) the barrier candidate for one theta."""
    w1 = build_w1(params, eta_max, tol)
    w2 = build_w2(params, eta_max, tol)
    corr = correction_coeffs(params, theta, w1, w2)
    return OuterAnsatz(params, float(theta), w1, w2, corr)


def what_pm(eta: ArrayLike, tau: ArrayLike, params: FlowParams, theta: float) -> FloatArray:
    """Value of the outer barrier candidate with parameter ``theta``."""
    return outer_ansatz(params, float(theta))(eta, tau)


def what_pm_d1(eta: ArrayLike, tau: ArrayLike, params: FlowParams, theta: float) -> FloatArray:
    ans = outer_ansatz(params, float(theta))
    return ans.pieces_d(_offset(eta, params), tau).wp


def lemma_constants(params: FlowParams, theta: float) -> dict[str, float]:
    """Anchor-dependent far-field constants recorded in build metadata."""
    ans = outer_ansatz(params, float(theta))
    eta = np.array([1e4 * params.A])
    g = params.gamma
    d = eta - params.A
    h = ans.w1tab.derivs_d(d)
    lead = (params.n - 1) * (1 + g) * params.A ** (1 / g) / g**3
    scale = eta ** (1 / g + 2)
    C = float((scale * h[0] - lead * np.log(eta))[0])
    K, Cpp, rel = fit_hhat_second_derivative(params, theta, ans.w1tab, ans.w2tab)
    return {"C": C, "C_pp": Cpp, "v21_coefficient_fit": K, "fit_rel_residual": rel}
