"""Inner barriers, the glue relation and composite sub/supersolutions.

The supersolution side (``+``) pairs the outer candidate with ``theta_plus``
and the inner piece ``wbar0(xi + C1)/(1 + eps)``; the subsolution side (``-``)
pairs ``theta_minus`` with ``wbar0(xi + C2)/(1 - eps)``.  The shifts are fixed
by continuity at ``xi = xi1``:

    wbar0(xi1 + C) = (1 +- eps) e^{gamma tau} what(A + xi1 e^{-gamma tau}, tau).

Shifts are solved directly at every requested time (one vectorized Newton
inversion), and their time derivatives follow from differentiating the glue
relation, so no finite-difference slopes enter the operator checks.  A
geometric-grid table of both shifts is kept for reporting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import soliton as sol
from .coords import FlowParams, make_params
from .outer import OuterAnsatz, outer_ansatz, what0_d
from .residual import I_residual_band, ScanReport, default_tau_grid, scan_outer, sign_scan
from .soliton import SolitonProfile, solve_soliton

FloatArray = NDArray[np.float64]
Side = Literal["+", "-"]

_GLUE_TOL = 1e-12


class GlueError(ValueError):
    """The glue relation has no solution (outer value non-positive)."""


def _sign(side: str) -> int:
    if side not in ("+", "-"):
        raise ValueError(f"side must be '+' or '-', got {side!r}")
    return 1 if side == "+" else -1


def inner_pm(profile: SolitonProfile, xi: ArrayLike, side: Side, C: ArrayLike, eps: float) -> FloatArray:
    """``wbar0(xi + C)/(1 +- eps)``."""
    lam = 1.0 / (1.0 + _sign(side) * eps)
    return lam * sol.eval(profile, np.asarray(xi, float) + np.asarray(C, float))


def _outer_rhs(ans: OuterAnsatz, xi1: float, tau: FloatArray) -> tuple[FloatArray, FloatArray]:
    """``e^{gamma tau} what(A + xi1 e^{-gamma tau})`` and its total tau-derivative."""
    g = ans.params.gamma
    et = np.exp(-g * tau)
    w, we, _, wt = ans.derivs_d(xi1 * et, tau)
    value = w / et
    rate = (g * w - g * xi1 * et * we + wt) / et
    return value, rate


def solve_glue(tau: ArrayLike, side: Side, params: FlowParams, *, ans: OuterAnsatz | None = None,
               profile: SolitonProfile | None = None, xi1: float | None = None,
               eps: float | None = None) -> FloatArray:
    """Shift ``C(tau)`` continuing the inner piece into the outer one at ``xi1``."""
    s = _sign(side)
    ans = ans or outer_ansatz(params, params.theta_plus if s > 0 else params.theta_minus)
    profile = profile or solve_soliton(params)
    xi1 = params.xi1 if xi1 is None else xi1
    eps = params.eps if eps is None else eps
    tau = np.asarray(tau, float)
    rhs, _ = _outer_rhs(ans, xi1, tau)
    target = (1 + s * eps) * rhs
    if np.any(~(target > 0)):
        bad = float(np.atleast_1d(tau)[np.flatnonzero(~(np.atleast_1d(target) > 0))[0]])
        raise GlueError(f"outer value non-positive at tau={bad}: below barrier validity")
    return sol.invert(profile, target, tol=_GLUE_TOL) - xi1


@dataclass(frozen=True)
class InnerBranch:
    """One inner barrier as a profile with analytic derivatives for ``I``."""

    barrier: "CompositeBarrier"
    side: Side

    def derivs(self, xi: FloatArray, tau: FloatArray) -> tuple[FloatArray, ...]:
        b = self.barrier
        C, Cp = b.shift(tau, self.side)
        lam = 1.0 / (1.0 + _sign(self.side) * b.eps)
        W, Wp, Wpp = b.soliton.derivs(xi + C)
        return lam * W, lam * Wp, lam * Wpp, lam * Wp * Cp


@dataclass(frozen=True)
class CompositeBarrier:
    params: FlowParams
    outer_plus: OuterAnsatz
    outer_minus: OuterAnsatz
    soliton: SolitonProfile
    eps: float
    xi0: float
    xi1: float
    tau0: float
    tau1: float
    tau_grid: FloatArray
    C1tab: FloatArray
    C2tab: FloatArray
    shift_offset: float = 0.0
    meta: dict[str, Any] = field(default_factory=dict)

    def outer(self, side: Side) -> OuterAnsatz:
        return self.outer_plus if _sign(side) > 0 else self.outer_minus

    def shift(self, tau: ArrayLike, side: Side) -> tuple[FloatArray, FloatArray]:
        """``C(tau)`` and ``C'(tau)`` from the glue relation and its derivative."""
        s = _sign(side)
        tau = np.asarray(tau, float)
        flat = np.atleast_1d(tau).ravel()
        uniq, inv = np.unique(flat, return_inverse=True)
        ans = self.outer(side)
        rhs, rate = _outer_rhs(ans, self.xi1, uniq)
        target = (1 + s * self.eps) * rhs
        if np.any(~(target > 0)):
            raise GlueError("outer value non-positive: below barrier validity")
        arg = sol.invert(self.soliton, target, tol=_GLUE_TOL)
        C = arg - self.xi1
        Cp = (1 + s * self.eps) * rate / sol.eval_d1(self.soliton, arg)
        return C[inv].reshape(tau.shape), Cp[inv].reshape(tau.shape)

    def _raw(self, xi: FloatArray, tau: FloatArray, side: Side) -> FloatArray:
        s = _sign(side)
        xi, tau = np.broadcast_arrays(np.asarray(xi, float), np.asarray(tau, float))
        out = np.empty(xi.shape)
        inner = xi <= self.xi1
        if np.any(inner):
            C, _ = self.shift(tau[inner], side)
            out[inner] = inner_pm(self.soliton, xi[inner], side, C, self.eps)
        if np.any(~inner):
            g = self.params.gamma
            et = np.exp(-g * tau[~inner])
            out[~inner] = self.outer(side).pieces_d(xi[~inner] * et, tau[~inner]).w / et
        del s
        return out

    def composite(self, xi: ArrayLike, tau: ArrayLike, side: Side) -> FloatArray:
        """``w^+-_eps(xi, tau)``; a shifted view evaluates at ``xi - gamma A shift``."""
        xi = np.asarray(xi, float) - self.params.speed * self.shift_offset
        return self._raw(xi, np.asarray(tau, float), side)

    def composite_d1(self, xi: ArrayLike, tau: ArrayLike, side: Side, branch: Literal["inner", "outer"]) -> FloatArray:
        """``xi``-derivative of one branch, evaluated anywhere it is defined."""
        xi, tau = np.broadcast_arrays(np.asarray(xi, float) - self.params.speed * self.shift_offset,
                                      np.asarray(tau, float))
        if branch == "inner":
            C, _ = self.shift(tau, side)
            lam = 1.0 / (1.0 + _sign(side) * self.eps)
            return lam * sol.eval_d1(self.soliton, xi + C)
        g = self.params.gamma
        return self.outer(side).pieces_d(xi * np.exp(-g * tau), tau).wp

    def inner_branch(self, side: Side) -> InnerBranch:
        return InnerBranch(self, side)

    def tuning(self) -> dict[str, float]:
        return {"xi0": self.xi0, "xi1": self.xi1, "eps": self.eps, "tau0": self.tau0, "tau1": self.tau1}

    def shift_table_csv(self) -> str:
        lines = ["# coord=tau time=none", "tau,C1,C2"]
        for t, a, b in zip(self.tau_grid, self.C1tab, self.C2tab):
            lines.append(f"{t:.17g},{a:.17g},{b:.17g}")
        return "\n".join(lines) + "\n"


def shifted(barrier: CompositeBarrier, shift: float) -> CompositeBarrier:
    """View of ``barrier`` pre-composed with ``xi -> xi - gamma A shift``."""
    return replace(barrier, shift_offset=barrier.shift_offset + float(shift))


def assemble(params: FlowParams, *, eps: float | None = None, xi0: float | None = None,
             xi1: float | None = None, tau0: float | None = None, tau1: float | None = None,
             tau_span: float = 20.0, tau_nodes: int = 161, profile: SolitonProfile | None = None) -> CompositeBarrier:
    """Build a composite barrier for explicit tuning values (defaults from ``params``)."""
    eps = params.eps if eps is None else float(eps)
    xi0 = params.xi0 if xi0 is None else float(xi0)
    xi1 = params.xi1 if xi1 is None else float(xi1)
    tau0 = params.tau0 if tau0 is None else float(tau0)
    tau1 = tau0 if tau1 is None else float(tau1)
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if not xi1 > 0:
        raise ValueError("xi1 must be positive")
    if tau1 < tau0:
        raise ValueError("tau1 must be at least tau0")
    p = replace(params, eps=eps if eps > 0 else params.eps, xi0=xi0, xi1=xi1, tau0=tau0)
    ap = outer_ansatz(params, params.theta_plus)
    am = outer_ansatz(params, params.theta_minus)
    prof = profile or solve_soliton(params)
    d_min = float(np.exp(max(ap.w1tab.x[0], ap.w2tab.x[0])))
    tau_hi = np.log(xi1 / d_min) / params.gamma - 1.0
    if tau_hi <= tau1:
        raise GlueError("tau1 lies beyond the range covered by the outer tables")
    grid = default_tau_grid(tau1, min(tau_span, tau_hi - tau1), tau_nodes)
    C1 = solve_glue(grid, "+", params, ans=ap, profile=prof, xi1=xi1, eps=eps)
    C2 = solve_glue(grid, "-", params, ans=am, profile=prof, xi1=xi1, eps=eps)
    return CompositeBarrier(p, ap, am, prof, eps, xi0, xi1, tau0, tau1, grid, C1, C2)


# ---------------------------------------------------------------------------
# structural checks


@dataclass
class Prop61Report:
    ordering_margin: float
    positivity_margin: float
    continuity_gap: float
    jump_margin_plus: float
    jump_margin_minus: float
    shift_order_margin: float
    scans: dict[str, ScanReport] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and all(r.ok for r in self.scans.values())

    def to_dict(self) -> dict[str, Any]:
        out = {k: getattr(self, k) for k in ("ordering_margin", "positivity_margin", "continuity_gap",
                                             "jump_margin_plus", "jump_margin_minus", "shift_order_margin")}
        out["violations"] = list(self.violations)
        out["scans"] = {k: v.to_dict() for k, v in self.scans.items()}
        out["ok"] = self.ok
        return json.loads(json.dumps(out, default=float))


def default_xi_grid(barrier: CompositeBarrier, count: int = 400) -> FloatArray:
    """Sample points spanning both branches: ``[-10, 4 xi1]`` plus the far field."""
    near = np.linspace(-10.0, 4 * barrier.xi1, count)
    far = np.geomspace(4 * barrier.xi1, 1e3, count // 4)
    return np.unique(np.concatenate([near, far, [barrier.xi1]]))


def scan_inner(barrier: CompositeBarrier, side: Side, tau_lo: float | None = None, *, span: float = 8.0,
               n_xi: int = 400, n_tau: int = 41, xi_lo: float = -10.0, expected: int | None = None) -> ScanReport:
    """Sign of ``I`` on the inner branch over ``xi in [xi_lo, xi1]``."""
    tau_lo = barrier.tau1 if tau_lo is None else tau_lo
    taus = default_tau_grid(tau_lo, span, n_tau)
    xs = np.linspace(xi_lo, barrier.xi1, n_xi)
    X, TT = np.meshgrid(xs, taus)
    branch = barrier.inner_branch(side)
    sign = _sign(side) if expected is None else expected

    def evaluate(x: FloatArray, t: FloatArray) -> tuple[FloatArray, FloatArray]:
        return I_residual_band(branch, x, t, barrier.params)

    region = {"xi": [xi_lo, barrier.xi1], "tau": [taus[0], taus[-1]], "side": side}
    return sign_scan(evaluate, X, TT, sign, operator="I-inner", region=region)


def check_prop61(barrier: CompositeBarrier, xi_grid: ArrayLike | None = None, tau_grid: ArrayLike | None = None,
                 *, scans: bool = True, swap: bool = False) -> Prop61Report:
    """Ordering, continuity, operator signs and derivative jumps at ``xi1``.

    With ``swap`` the two sides trade roles, which must produce violations.
    """
    xs = default_xi_grid(barrier) if xi_grid is None else np.asarray(xi_grid, float)
    ts = default_tau_grid(barrier.tau1, 8.0, 41) if tau_grid is None else np.asarray(tau_grid, float)
    up, lo = ("-", "+") if swap else ("+", "-")
    X, TT = np.meshgrid(xs, ts)
    wp = barrier.composite(X, TT, up)
    wm = barrier.composite(X, TT, lo)
    ordering = float(np.min((wp - wm) / wp))
    positivity = float(np.min(wm / np.abs(wp)))

    x1 = np.full_like(ts, barrier.xi1 + barrier.params.speed * barrier.shift_offset)
    gaps = []
    jumps = {}
    for side in (up, lo):
        C, _ = barrier.shift(ts, side)
        left = inner_pm(barrier.soliton, barrier.xi1, side, C, barrier.eps)
        g = barrier.params.gamma
        et = np.exp(-g * ts)
        right = barrier.outer(side).pieces_d(barrier.xi1 * et, ts).w / et
        gaps.append(float(np.max(np.abs(left - right) / np.abs(right))))
        dl = barrier.composite_d1(x1, ts, side, "inner")
        dr = barrier.composite_d1(x1, ts, side, "outer")
        jumps[side] = (dl - dr) / np.abs(dr)
    jp = float(np.min(jumps[up]))
    jm = float(np.min(-jumps[lo]))
    C1, _ = barrier.shift(ts, up)
    C2, _ = barrier.shift(ts, lo)
    corder = float(np.min(C1 - C2))

    rep = Prop61Report(ordering, positivity, max(gaps), jp, jm, corder)
    if not ordering > 0:
        rep.violations.append(f"(i) ordering: min (w+ - w-)/w+ = {ordering:.3e}")
    if not positivity > 0:
        rep.violations.append(f"(i) positivity: min w-/w+ = {positivity:.3e}")
    if not rep.continuity_gap <= 1e-10:
        rep.violations.append(f"(ii) continuity gap {rep.continuity_gap:.3e}")
    if not jp > 0:
        rep.violations.append(f"(iv) supersolution jump margin {jp:.3e}")
    if not jm > 0:
        rep.violations.append(f"(iv) subsolution jump margin {jm:.3e}")
    if not corder > 0:
        rep.violations.append(f"shift ordering C1 - C2 = {corder:.3e}")
    if scans:
        span = barrier.tau1 - barrier.tau0 + 8.0
        rep.scans["B+"] = scan_outer(barrier.outer(up), barrier.xi0, barrier.tau0, 1, span=span)
        rep.scans["B-"] = scan_outer(barrier.outer(lo), barrier.xi0, barrier.tau0, -1, span=span)
        rep.scans["I+"] = scan_inner(barrier, up, expected=1)
        rep.scans["I-"] = scan_inner(barrier, lo, expected=-1)
    return rep


# ---------------------------------------------------------------------------
# tuning search

XI0_CANDIDATES = (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.8, 2.0, 2.5, 3.0, 4.0, 5.0, 10.0, 20.0, 40.0)
XI1_FACTORS = (1.0, 1.05, 1.1, 1.2, 1.35, 1.5, 2.0, 4.0, 8.0)
EPS_CANDIDATES = (0.1, 0.05, 0.02, 0.01)


@dataclass
class TuneResult:
    barrier: CompositeBarrier | None
    report: Prop61Report | None
    tried: list[dict[str, Any]]

    @property
    def ok(self) -> bool:
        return self.barrier is not None and self.report is not None and self.report.ok


TAU0_CANDIDATES = (2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 20.0, 24.0)


def find_xi0(params: FlowParams, tau0_candidates: tuple[float, ...] = TAU0_CANDIDATES,
             xi0_candidates: tuple[float, ...] = XI0_CANDIDATES) -> tuple[float, float] | None:
    """Smallest ``xi0`` (then smallest ``tau0``) with clean outer scans on both sides."""
    ap = outer_ansatz(params, params.theta_plus)
    am = outer_ansatz(params, params.theta_minus)
    d_min = float(np.exp(max(ap.w1tab.x[0], ap.w2tab.x[0])))
    for xi0 in xi0_candidates:
        for tau0 in tau0_candidates:
            if xi0 * np.exp(-params.gamma * (tau0 + 8.0)) < d_min:
                break
            if scan_outer(ap, xi0, tau0, 1).ok and scan_outer(am, xi0, tau0, -1).ok:
                return xi0, tau0
    return None


def corridor_ok(barrier: CompositeBarrier, xi: float, tau: ArrayLike) -> bool:
    """Whether ``e^{gamma tau} what0`` at ``xi`` lies strictly between the outer branches.

    This is the right-boundary value used by the rescaled flow solver.
    """
    p = barrier.params
    tau = np.atleast_1d(np.asarray(tau, float))
    d = xi * np.exp(-p.gamma * tau)
    w0 = what0_d(d, p)[0]
    up = barrier.outer_plus.pieces_d(d, tau).w
    lo = barrier.outer_minus.pieces_d(d, tau).w
    return bool(np.all((lo < w0) & (w0 < up)))


def auto_tune(params: FlowParams, *, eps: float | None = None, tau1_span: float = 16.0,
              xi1_factors: tuple[float, ...] = XI1_FACTORS, corridor_xi: float | None = None) -> TuneResult:
    """Search ``(xi0, tau0)`` then ``(eps, xi1, tau1)`` until every check passes.

    ``eps`` fixes the inner gap; otherwise the candidates are tried from the
    largest down.  ``tau1`` is raised in unit steps from ``tau0``; a candidate
    ``xi1`` is abandoned once its jump margins stop improving.  With
    ``corridor_xi`` the start time must also place the flow's right boundary
    value at that ``xi`` inside the outer corridor.
    """
    tried: list[dict[str, Any]] = []
    found = find_xi0(params)
    if found is None:
        return TuneResult(None, None, [{"stage": "xi0", "ok": False}])
    xi0, tau0 = found
    tried.append({"stage": "xi0", "xi0": xi0, "tau0": tau0, "ok": True})
    prof = solve_soliton(params)
    eps_list = (float(eps),) if eps is not None else EPS_CANDIDATES
    last: tuple[CompositeBarrier, Prop61Report] | None = None
    for e in eps_list:
        for f in xi1_factors:
            xi1 = round(f * xi0, 10)
            prev = -np.inf
            for k in range(int(tau1_span) + 1):
                tau1 = tau0 + k
                try:
                    bar = assemble(params, eps=e, xi0=xi0, xi1=xi1, tau0=tau0, tau1=tau1, profile=prof)
                except GlueError:
                    tried.append({"stage": "glue", "eps": e, "xi1": xi1, "tau1": tau1, "ok": False})
                    continue
                if corridor_xi is not None and not corridor_ok(bar, corridor_xi, default_tau_grid(tau1, 8.0, 41)):
                    tried.append({"stage": "corridor", "eps": e, "xi1": xi1, "tau1": tau1, "ok": False})
                    continue
                quick = check_prop61(bar, scans=False)
                if not quick.ok:
                    tried.append({"stage": "certification", "eps": e, "xi1": xi1, "tau1": tau1, "ok": False,
                                  "why": quick.violations[:2]})
                    last = (bar, quick)
                    margin = min(quick.jump_margin_plus, quick.jump_margin_minus)
                    if margin < 0 and margin - prev < 1e-3:
                        break
                    prev = margin
                    continue
                inner_ok = scan_inner(bar, "+").ok and scan_inner(bar, "-").ok
                tried.append({"stage": "inner", "eps": e, "xi1": xi1, "tau1": tau1, "ok": inner_ok})
                if inner_ok:
                    rep = check_prop61(bar)
                    if not rep.ok:
                        last = (bar, rep)
                        continue
                    meta = dict(bar.meta, tuning=bar.tuning(), search_steps=len(tried))
                    if corridor_xi is not None:
                        meta["corridor_xi"] = corridor_xi
                    bar = replace(bar, meta=meta)
                    return TuneResult(bar, rep, tried)
    if last is not None:
        return TuneResult(last[0], last[1], tried)
    return TuneResult(None, None, tried)


def default_barrier(params: FlowParams | None = None, corridor_xi: float | None = None) -> CompositeBarrier:
    """Tuned barrier for the reference configuration (n=5, gamma=1, A=1)."""
    params = params or make_params(5)
    res = auto_tune(params, eps=params.eps, corridor_xi=corridor_xi)
    if not res.ok or res.barrier is None:
        raise RuntimeError("auto-tune found no valid barrier for these parameters")
    return res.barrier
