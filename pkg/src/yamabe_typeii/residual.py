"""Evolution operators and sign scans.

Three operators act on positive profiles:

* ``B`` on outer profiles ``what(eta, tau)``,
* ``I`` on inner profiles ``wbar(xi, tau)``,
* the cylindrical form on ``w(s, t)``.

A profile is either an object carrying analytic derivatives or a plain value
function, in which case derivatives come from finite differences with a
Richardson error estimate.  Every evaluation returns the operator value and
a band: the size below which the value cannot be trusted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Literal, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .coords import FlowParams
from .outer import OuterAnsatz

FloatArray = NDArray[np.float64]
Derivs = tuple[FloatArray, FloatArray, FloatArray, FloatArray]

_ROUND = 64 * np.finfo(float).eps


class AnalyticProfile(Protocol):
    """Anything returning ``(w, w_x, w_xx, w_t)`` at broadcast points."""

    def __call__(self, x: FloatArray, t: FloatArray) -> Derivs: ...


@dataclass(frozen=True)
class OperatorSample:
    operator: Literal["B-outer", "I-inner", "Cyl"]
    point: tuple[float, float]
    value: float
    derivatives_used: Literal["analytic", "FD"]
    step: float | None = None
    error_estimate: float | None = None


def _check_positive(w: FloatArray) -> None:
    if np.any(~(w > 0)):
        raise ValueError("operator needs a positive profile at every point")


# ---------------------------------------------------------------------------
# finite-difference derivatives


def fd_derivatives(value: Callable[[FloatArray, FloatArray], FloatArray], x: ArrayLike, t: ArrayLike,
                   hx: float = 1e-3, ht: float = 1e-4) -> tuple[Derivs, FloatArray]:
    """Central-difference ``(w, w_x, w_xx, w_t)`` plus a Richardson estimate.

    Derivatives are computed at steps ``h`` and ``h/2``; the returned values
    are the extrapolated ones and the estimate is the largest relative gap.
    """
    x, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))

    def at(h: float, k: float) -> Derivs:
        w = value(x, t)
        wp, wm = value(x + h, t), value(x - h, t)
        d1 = (wp - wm) / (2 * h)
        d2 = (wp - 2 * w + wm) / h**2
        dt = (value(x, t + k) - value(x, t - k)) / (2 * k)
        return w, d1, d2, dt

    coarse = at(hx, ht)
    fine = at(hx / 2, ht / 2)
    best = tuple(f + (f - c) / 3.0 for c, f in zip(coarse, fine))
    err = np.zeros_like(x)
    for c, f in zip(coarse[1:], fine[1:]):
        err = np.maximum(err, np.abs(f - c))
    return best, err  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# B operator


def _b_generic(w: FloatArray, we: FloatArray, wee: FloatArray, wt: FloatArray, eta: FloatArray,
               tau: FloatArray, params: FlowParams) -> tuple[FloatArray, FloatArray]:
    n, g = params.n, params.gamma
    e2 = np.exp(-2 * g * tau)
    diff = (n - 1) * e2 * (wee / w + (n - 6) / 4 * (we / w) ** 2)
    lin = g * eta * we + w - params.cyl
    value = wt - diff - lin
    band = _ROUND * (np.abs(wt) + np.abs(diff) + np.abs(g * eta * we) + np.abs(w) + params.cyl)
    return value, band


def _b_structured(ans: OuterAnsatz, d: FloatArray, tau: FloatArray) -> tuple[FloatArray, FloatArray]:
    """``B`` for the barrier form, arranged so nothing cancels catastrophically.

    Uses ``L[what0] = 0`` and ``L[e^{-2 gamma tau} h] = (n-1) e^{-2 gamma tau}
    (what0''/what0 + theta what0'^2/what0^2)`` exactly, leaving

        e^{2 gamma tau} B/(n-1) = (theta - thr) (w0'/w0)^2
            - (delta'' w0 - w0'' delta)/(w w0)
            - thr (delta' w0 - w0' delta)(w' w0 + w0' w)/(w w0)^2
            - e^{2 gamma tau} source/(n-1).
    """
    p = ans.params
    n, g, thr = p.n, p.gamma, p.threshold
    pc = ans.pieces_d(d, tau)
    w0, w0p, w0pp = pc.w0, pc.w0p, pc.w0pp
    w, wp = pc.w, pc.wp
    _check_positive(w)
    t1 = (ans.theta - thr) * (w0p / w0) ** 2
    t2 = (pc.deltapp * w0 - w0pp * pc.delta) / (w * w0)
    t3 = thr * (pc.deltap * w0 - w0p * pc.delta) * (wp * w0 + w0p * w) / (w * w0) ** 2
    e2 = np.exp(-2 * g * tau)
    t4 = pc.source / ((n - 1) * e2)
    scaled = t1 - t2 - t3 - t4
    mags = (np.abs(t1) + np.abs(pc.deltapp / w) + np.abs(w0pp * pc.delta / (w * w0))
            + np.abs(thr) * np.abs(pc.deltap * w0 * (wp * w0 + w0p * w)) / (w * w0) ** 2
            + np.abs(thr) * np.abs(w0p * pc.delta * (wp * w0 + w0p * w)) / (w * w0) ** 2
            + np.abs(t4))
    fac = (n - 1) * e2
    return fac * scaled, fac * _ROUND * mags


def B_residual_band(profile: Any, eta: ArrayLike, tau: ArrayLike, params: FlowParams, *,
                    offset: bool = False, hx: float = 1e-4, ht: float = 1e-4) -> tuple[FloatArray, FloatArray]:
    """Operator value and band.  With ``offset`` the first argument is ``eta - A``."""
    eta_a, tau_a = np.broadcast_arrays(np.asarray(eta, float), np.asarray(tau, float))
    d = eta_a if offset else eta_a - params.A
    full = params.A + d
    if isinstance(profile, OuterAnsatz):
        return _b_structured(profile, d, tau_a)
    if hasattr(profile, "derivs_d"):
        w, we, wee, wt = profile.derivs_d(d, tau_a)
        _check_positive(w)
        return _b_generic(w, we, wee, wt, full, tau_a, params)
    out = profile(full, tau_a)
    if isinstance(out, tuple):
        w, we, wee, wt = out
        _check_positive(w)
        return _b_generic(w, we, wee, wt, full, tau_a, params)
    (w, we, wee, wt), err = fd_derivatives(profile, full, tau_a, hx, ht)
    _check_positive(w)
    value, band = _b_generic(w, we, wee, wt, full, tau_a, params)
    n, g = params.n, params.gamma
    e2 = np.exp(-2 * g * tau_a)
    fd_band = err * (1 + g * full + (n - 1) * e2 * (1 / w + abs(n - 6) / 2 * np.abs(we) / w**2))
    return value, band + fd_band


def B_residual(profile: Any, eta: ArrayLike, tau: ArrayLike, params: FlowParams) -> FloatArray:
    """``B[what] = what_tau - (n-1)e^{-2 gamma tau}(what''/what + (n-6)/4 what'^2/what^2)
    - (gamma eta what' + what - (n-1)(n-2))``."""
    return B_residual_band(profile, eta, tau, params)[0]


# ---------------------------------------------------------------------------
# I operator


def _i_generic(w: FloatArray, wx: FloatArray, wxx: FloatArray, wt: FloatArray, tau: FloatArray,
               params: FlowParams) -> tuple[FloatArray, FloatArray]:
    n, g = params.n, params.gamma
    et = np.exp(-g * tau)
    time_part = et * (wt - (1 + g) * w)
    diff = (n - 1) * (wxx / w + (n - 6) / 4 * (wx / w) ** 2)
    adv = params.speed * wx
    value = time_part - diff + params.cyl - adv
    band = _ROUND * (et * (np.abs(wt) + (1 + g) * w) + (n - 1) * (np.abs(wxx / w) + abs(n - 6) / 4 * (wx / w) ** 2)
                     + params.cyl + np.abs(adv))
    return value, band


def I_residual_band(profile: Any, xi: ArrayLike, tau: ArrayLike, params: FlowParams, *,
                    hx: float = 1e-3, ht: float = 1e-4) -> tuple[FloatArray, FloatArray]:
    xi_a, tau_a = np.broadcast_arrays(np.asarray(xi, float), np.asarray(tau, float))
    out = profile.derivs(xi_a, tau_a) if hasattr(profile, "derivs") else profile(xi_a, tau_a)
    if isinstance(out, tuple):
        w, wx, wxx, wt = out
        _check_positive(w)
        return _i_generic(w, wx, wxx, wt, tau_a, params)
    (w, wx, wxx, wt), err = fd_derivatives(profile, xi_a, tau_a, hx, ht)
    _check_positive(w)
    value, band = _i_generic(w, wx, wxx, wt, tau_a, params)
    n, g = params.n, params.gamma
    fd_band = err * (np.exp(-g * tau_a) + (n - 1) * (1 / w + abs(n - 6) / 2 * np.abs(wx) / w**2) + params.speed)
    return value, band + fd_band


def I_residual(profile: Any, xi: ArrayLike, tau: ArrayLike, params: FlowParams) -> FloatArray:
    """``I[wbar] = e^{-gamma tau}(wbar_tau - (1+gamma) wbar) - (n-1)(wbar''/wbar
    + (n-6)/4 wbar'^2/wbar^2) + (n-1)(n-2) - gamma A wbar'``."""
    return I_residual_band(profile, xi, tau, params)[0]


# ---------------------------------------------------------------------------
# cylindrical operator


def cyl_residual(w: Callable[[FloatArray, FloatArray], FloatArray], s: ArrayLike, t: ArrayLike,
                 params: FlowParams, h: float = 1e-2, dt: float = 1e-4) -> tuple[FloatArray, FloatArray]:
    """``(m/(n-1)) (w^{(n+2)/4})_t - (w^{(n-2)/4})_ss + ((n-2)/2)^2 w^{(n-2)/4}``.

    Space: five-point fourth-order stencil on ``v = w^{(n-2)/4}``.  Time:
    ``(w^{(n+2)/4})_t = ((n+2)/4) w^{(n-2)/4} w_t`` with a central difference
    for ``w_t``.  The value is Richardson-extrapolated from ``(h, dt)`` and
    ``(h/2, dt/2)``; the second return is the gap between the two levels.
    """
    n, m = params.n, params.m
    s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
    q = (n - 2) / 4.0

    def level(hh: float, kk: float) -> FloatArray:
        v = [w(s + j * hh, t) ** q for j in (-2, -1, 0, 1, 2)]
        for arr in v:
            _check_positive(arr)
        vss = (-v[0] + 16 * v[1] - 30 * v[2] + 16 * v[3] - v[4]) / (12 * hh**2)
        wt = (w(s, t + kk) - w(s, t - kk)) / (2 * kk)
        lhs = m / (n - 1) * (n + 2) / 4.0 * v[2] * wt
        return lhs - vss + ((n - 2) / 2.0) ** 2 * v[2]

    r1 = level(h, dt)
    r2 = level(h / 2, dt / 2)
    return r2 + (r2 - r1) / 3.0, np.abs(r2 - r1)


# ---------------------------------------------------------------------------
# sign scans


@dataclass
class ScanReport:
    operator: str
    region: dict[str, Any]
    expected_sign: int
    samples: int
    passes: int
    within_band: int
    violations: list[tuple[float, float, float]] = field(default_factory=list)
    worst_margin: float = float("inf")
    worst_relative_margin: float = float("inf")
    worst_point: tuple[float, float] | None = None

    @property
    def band_fraction(self) -> float:
        return self.within_band / self.samples if self.samples else 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["violations"] = len(self.violations)
        out["violation_points"] = [list(v) for v in self.violations[:20]]
        out["band_fraction"] = self.band_fraction
        return json.loads(json.dumps(out, default=float))


def sign_scan(evaluate: Callable[[FloatArray, FloatArray], tuple[FloatArray, FloatArray]],
              x: FloatArray, t: FloatArray, expected_sign: int, *, operator: str = "",
              region: dict[str, Any] | None = None, scale: FloatArray | None = None) -> ScanReport:
    """Classify every sample as pass, within-band or violation.

    ``x`` and ``t`` are broadcast point arrays; ``evaluate`` returns values
    and bands.  Samples are processed in array order so the report is
    deterministic.
    """
    if expected_sign not in (1, -1):
        raise ValueError("expected_sign must be +1 or -1")
    x, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))
    value, band = evaluate(x, t)
    signed = expected_sign * value
    within = np.abs(value) <= band
    passed = (signed > band)
    bad = ~(within | passed)
    rep = ScanReport(operator, dict(region or {}), expected_sign, int(value.size), int(passed.sum()),
                     int(within.sum()))
    flat = np.flatnonzero(bad.ravel())
    rep.violations = [(float(x.ravel()[i]), float(t.ravel()[i]), float(value.ravel()[i])) for i in flat]
    if value.size:
        i = int(np.argmin(signed.ravel()))
        rep.worst_margin = float(signed.ravel()[i])
        rep.worst_point = (float(x.ravel()[i]), float(t.ravel()[i]))
        denom = np.abs(scale).ravel() if scale is not None else np.maximum(np.abs(value).ravel(), 1e-300)
        rep.worst_relative_margin = float(np.min(signed.ravel() / denom))
    return rep


def default_tau_grid(tau0: float, span: float = 8.0, count: int = 41) -> FloatArray:
    """Geometric grid on ``[tau0, tau0 + span]`` (denser near ``tau0``)."""
    if tau0 > 0:
        return np.geomspace(tau0, tau0 + span, count)
    return tau0 + np.geomspace(1.0, 1.0 + span, count) - 1.0


def scan_outer(ans: OuterAnsatz, xi0: float, tau0: float, expected_sign: int, *, span: float = 8.0,
               eta_hi: float | None = None, n_eta: int = 400, n_tau: int = 41) -> ScanReport:
    """Sign of ``B`` on ``eta in [A + xi0 e^{-gamma tau}, 1e3 A]``, ``tau in [tau0, tau0+span]``."""
    p = ans.params
    taus = default_tau_grid(tau0, span, n_tau)
    hi = (1e3 * p.A if eta_hi is None else eta_hi) - p.A
    u = np.linspace(0.0, 1.0, n_eta)
    lo = xi0 * np.exp(-p.gamma * taus)
    d = np.exp(np.log(lo)[:, None] + u[None, :] * (np.log(hi) - np.log(lo))[:, None])
    tt = np.broadcast_to(taus[:, None], d.shape)

    def evaluate(dd: FloatArray, ta: FloatArray) -> tuple[FloatArray, FloatArray]:
        return B_residual_band(ans, dd, ta, p, offset=True)

    region = {"eta_minus_A": [f"xi0*exp(-gamma*tau), xi0={xi0}", hi], "tau": [taus[0], taus[-1]],
              "theta": ans.theta, "decay_rate": f"exp(-{2 * p.gamma}*tau)"}
    rep = sign_scan(evaluate, d, tt, expected_sign, operator="B-outer", region=region)
    return rep
