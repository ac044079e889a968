"""Implicit time integration of the radial flow.

Two modes share one Newton/tridiagonal kernel:

* ``cylindrical-st``: ``w(s, t)`` on a fixed ``s`` grid.  The unknown is
  ``v = w^{(n-2)/4}``, for which ``w_t = cbar v_ss / v - (n-1)(n-2)``; the
  time difference is taken in ``w`` so spatially constant data follow the
  cylinder ``w - (n-1)(n-2) t`` exactly.
* ``rescaled-xitau``: ``wbar(xi, tau)`` in the frame following the tip,
  ``wbar_tau = (1+gamma) wbar + e^{gamma tau} [(n-1)(wbar''/wbar
  + (n-6)/4 wbar'^2/wbar^2) - (n-1)(n-2) + gamma A wbar']``.

Both use backward Euler with damped Newton; a step is accepted only when the
Newton update falls below ``1e-10`` relative and every value stays positive,
otherwise the step size is halved.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import solve_banded

from .coords import FlowParams
from .outer import outer_ansatz, what0_d

FloatArray = NDArray[np.float64]
Mode = Literal["cylindrical-st", "rescaled-xitau"]

NEWTON_TOL = 1e-10
DT_MIN = 1e-6
DT_MAX = 5e-3


class StepFailure(RuntimeError):
    """Newton did not converge or positivity failed at the smallest step."""

    def __init__(self, message: str, worst_node: int | None = None):
        super().__init__(message)
        self.worst_node = worst_node


class RunAborted(RuntimeError):
    """The run left its admissible regime (for example the boundary corridor)."""


@dataclass(frozen=True)
class Boundary:
    """Left boundary is always Robin ``(ln w)_x = left_slope``.

    The right boundary is Robin with ``right_slope`` or Dirichlet, given
    either by ``right_value(time)`` or, in rescaled mode, by the tail formula
    ``e^{gamma tau} what0(A + xi_max e^{-gamma tau})`` when ``right_kind`` is
    ``"tail"``.
    """

    left_slope: float = 2.0
    right_kind: Literal["robin", "dirichlet", "tail"] = "tail"
    right_slope: float = 0.0
    right_value: Callable[[float], float] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class FlowState:
    mode: Mode
    time: float
    grid: FloatArray
    values: FloatArray
    boundary: Boundary = Boundary()
    stats: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        g = np.asarray(self.grid, float)
        v = np.asarray(self.values, float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 5:
            raise ValueError("grid and values must be 1D arrays of equal length >= 5")
        steps = np.diff(g)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
            raise ValueError("flow grids must be uniform and increasing")
        if np.any(~(v > 0)):
            raise ValueError("flow values must be positive")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @property
    def h(self) -> float:
        return float(self.grid[1] - self.grid[0])


# ---------------------------------------------------------------------------
# boundary values


def tail_value(xi_max: float, tau: float, params: FlowParams) -> float:
    """``e^{gamma tau} what0(A + xi_max e^{-gamma tau})``: the cylindrical tail

    ``(n-1)(n-2)[(T-t) - (s/A)^{-1/gamma}]`` in rescaled units.
    """
    g = params.gamma
    et = math.exp(-g * tau)
    return float(what0_d(np.array([xi_max * et]), params)[0][0] / et)


def corridor(xi_max: float, tau: float, params: FlowParams) -> tuple[float, float, float]:
    """Lower outer branch, tail value and upper outer branch at ``xi_max``."""
    g = params.gamma
    et = math.exp(-g * tau)
    d = np.array([xi_max * et])
    t = np.array([tau])
    lo = outer_ansatz(params, params.theta_minus).pieces_d(d, t).w[0] / et
    up = outer_ansatz(params, params.theta_plus).pieces_d(d, t).w[0] / et
    return float(lo), tail_value(xi_max, tau, params), float(up)


def _right_value(state: FlowState, time: float, params: FlowParams) -> float | None:
    b = state.boundary
    if b.right_kind == "robin":
        return None
    if b.right_kind == "dirichlet":
        if b.right_value is None:
            raise ValueError("dirichlet boundary needs right_value")
        return float(b.right_value(time))
    if state.mode != "rescaled-xitau":
        raise ValueError("the tail boundary is defined in rescaled mode only")
    return tail_value(float(state.grid[-1]), time, params)


# ---------------------------------------------------------------------------
# Newton kernel


def _newton(F: Callable[[FloatArray], tuple[FloatArray, FloatArray, FloatArray, FloatArray]],
            x0: FloatArray, max_iter: int = 30) -> tuple[FloatArray, int, float]:
    """Damped Newton for a tridiagonal system, keeping ``x`` positive.

    ``F`` returns the residual with the sub-, main and super-diagonals of its
    Jacobian.  Convergence: relative update below ``NEWTON_TOL``.
    """
    x = x0.copy()
    for it in range(1, max_iter + 1):
        r, lo, di, up = F(x)
        if not np.all(np.isfinite(r)):
            raise StepFailure("non-finite residual", int(np.argmax(~np.isfinite(r))))
        ab = np.zeros((3, x.size))
        ab[0, 1:] = up[:-1]
        ab[1] = di
        ab[2, :-1] = lo[1:]
        try:
            dx = solve_banded((1, 1), ab, -r)
        except np.linalg.LinAlgError as exc:
            raise StepFailure(f"singular Jacobian: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise StepFailure("singular Jacobian")
        lam = 1.0
        while np.any(x + lam * dx <= 0):
            lam *= 0.5
            if lam < 1e-6:
                raise StepFailure("positivity lost in Newton", int(np.argmin(x + dx)))
        x = x + lam * dx
        upd = float(np.max(np.abs(lam * dx) / x))
        if upd <= NEWTON_TOL and lam == 1.0:
            return x, it, upd
    raise StepFailure(f"Newton did not converge (last relative update {upd:.2e})", int(np.argmax(np.abs(dx) / x)))


def _cyl_system(state: FlowState, dt: float, params: FlowParams, w_right: float | None):
    n = params.n
    q = (n - 2) / 4.0
    cbar, cyl = params.cbar, params.cyl
    h = state.h
    w_old = state.values
    b = state.boundary
    gl = math.exp(-2 * h * q * b.left_slope)
    N = w_old.size
    free = N if w_right is None else N - 1
    v_right = None if w_right is None else w_right**q
    gr = math.exp(2 * h * q * b.right_slope)

    def F(v: FloatArray):
        full = v if v_right is None else np.append(v, v_right)
        ext = np.concatenate([[full[1] * gl], full, [full[-2] * gr]])
        d2 = (ext[:-2] - 2 * ext[1:-1] + ext[2:]) / h**2
        w = full ** (1 / q)
        res = full * (w - w_old) / dt - cbar * d2 + cyl * full
        diag = (w - w_old) / dt + w / (q * dt) + 2 * cbar / h**2 + cyl
        lo = np.full(N, -cbar / h**2)
        upp = np.full(N, -cbar / h**2)
        upp[0] = -cbar * (1 + gl) / h**2
        lo[-1] = -cbar * (1 + gr) / h**2
        return res[:free], lo[:free], diag[:free], upp[:free]

    def finish(v: FloatArray) -> FloatArray:
        full = v if v_right is None else np.append(v, v_right)
        return full ** (1 / q)

    return F, w_old[:free] ** q, finish


def _resc_system(state: FlowState, dtau: float, params: FlowParams, w_right: float | None):
    n, g = params.n, params.gamma
    thr = params.threshold
    cyl, c = params.cyl, params.speed
    h = state.h
    w_old = state.values
    b = state.boundary
    E = math.exp(g * (state.time + dtau))
    el = math.exp(-2 * h * b.left_slope)
    er = math.exp(2 * h * b.right_slope)
    N = w_old.size
    free = N if w_right is None else N - 1

    def F(x: FloatArray):
        w = x if w_right is None else np.append(x, w_right)
        ext = np.concatenate([[w[1] * el], w, [w[-2] * er]])
        d1 = (ext[2:] - ext[:-2]) / (2 * h)
        d2 = (ext[:-2] - 2 * ext[1:-1] + ext[2:]) / h**2
        Q = (n - 1) * (d2 / w + thr * d1**2 / w**2) - cyl + c * d1
        res = (w - w_old) / dtau - (1 + g) * w - E * Q
        dQ_d = (n - 1) * (-2 / (h**2 * w) - d2 / w**2 - 2 * thr * d1**2 / w**3)
        dQ_l = (n - 1) * (1 / (h**2 * w) - thr * d1 / (h * w**2)) - c / (2 * h)
        dQ_u = (n - 1) * (1 / (h**2 * w) + thr * d1 / (h * w**2)) + c / (2 * h)
        # ghost nodes fold into the neighbours
        bl = (1 - el) / (2 * h)
        dQ_u0 = (n - 1) * ((1 + el) / (h**2 * w[0]) + 2 * thr * d1[0] * bl / w[0] ** 2) + c * bl
        br = (er - 1) / (2 * h)
        dQ_lN = (n - 1) * ((1 + er) / (h**2 * w[-1]) + 2 * thr * d1[-1] * br / w[-1] ** 2) + c * br
        dQ_u[0] = dQ_u0
        dQ_l[-1] = dQ_lN
        diag = 1 / dtau - (1 + g) - E * dQ_d
        return res[:free], (-E * dQ_l)[:free], diag[:free], (-E * dQ_u)[:free]

    def finish(x: FloatArray) -> FloatArray:
        return x if w_right is None else np.append(x, w_right)

    return F, w_old[:free].copy(), finish


def _try_step(state: FlowState, dt: float, params: FlowParams) -> FlowState:
    t_new = state.time + dt
    w_right = _right_value(state, t_new, params)
    if w_right is not None and not w_right > 0:
        raise StepFailure("non-positive Dirichlet value", state.values.size - 1)
    build = _cyl_system if state.mode == "cylindrical-st" else _resc_system
    F, x0, finish = build(state, dt, params, w_right)
    x, iters, upd = _newton(F, x0)
    w = finish(x)
    if np.any(~(w > 0)):
        raise StepFailure("positivity lost", int(np.argmin(w)))
    stats = {"newton_iterations": iters, "dt": dt, "last_update": upd}
    return replace(state, time=t_new, values=w, stats=stats)


def step(state: FlowState, dt: float, params: FlowParams, dt_min: float = DT_MIN) -> FlowState:
    """One backward-Euler step; ``dt`` is halved until Newton succeeds.

    The returned state's ``stats`` record the step actually taken and the
    number of rejections.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rejections = 0
    last: StepFailure | None = None
    dt_min = min(dt_min, dt)
    while dt >= dt_min * (1 - 1e-12):
        try:
            out = _try_step(state, dt, params)
            out.stats["rejections"] = rejections
            return out
        except StepFailure as exc:
            last = exc
            rejections += 1
            dt *= 0.5
    raise StepFailure(f"dt underflow below {dt_min:g}: {last}", last.worst_node if last else None)


# ---------------------------------------------------------------------------
# initial data


def uniform_grid(lo: float, hi: float, nodes: int) -> FloatArray:
    return np.linspace(lo, hi, int(nodes))


def init_from_barrier_mid(barrier: Any, tau_start: float | None = None, *, xi_min: float = -8.0,
                          xi_max: float = 12.0, nodes: int = 801) -> FlowState:
    """Geometric mean of the two composite barriers on a uniform ``xi`` grid."""
    tau = barrier.tau1 if tau_start is None else float(tau_start)
    if tau < barrier.tau1:
        raise ValueError("tau_start precedes the barrier validity start")
    xi = uniform_grid(xi_min, xi_max, nodes)
    up = barrier.composite(xi, tau, "+")
    lo = barrier.composite(xi, tau, "-")
    return FlowState("rescaled-xitau", tau, xi, np.sqrt(up * lo), Boundary(2.0, "tail"))


@dataclass(frozen=True)
class ConditionIIData:
    """Cylindrical initial data ``w0(s) = (n-1)(n-2) max(T - (sigma(s)/A)^{-1/gamma}, floor(s))``.

    ``sigma(s) = s_c + delta softplus((s - s_c)/delta)`` agrees with ``s``
    above ``s_c`` up to exponentially small terms and stays above ``s_c``;
    ``floor(s) = f_max e^{2(s-s0)}/(1 + e^{2(s-s0)})`` gives the smooth-origin
    decay ``w0 ~ e^{2s}``.
    """

    params: FlowParams
    s_c: float
    delta: float
    s0: float
    f_max: float

    def sigma(self, s: FloatArray) -> FloatArray:
        z = (np.asarray(s, float) - self.s_c) / self.delta
        return self.s_c + self.delta * np.logaddexp(0.0, z)

    def floor(self, s: FloatArray) -> FloatArray:
        z = 2 * (np.asarray(s, float) - self.s0)
        return self.f_max * np.exp(z - np.logaddexp(0.0, z))

    def __call__(self, s: ArrayLike) -> FloatArray:
        p = self.params
        s = np.asarray(s, float)
        main = p.T - (self.sigma(s) / p.A) ** (-1 / p.gamma)
        return p.cyl * np.maximum(main, self.floor(s))

    def rescaled(self, xi: ArrayLike) -> FloatArray:
        """``wbar(xi) = T^{-(1+gamma)} w0(A T^{-gamma} + xi)`` at ``tau = -ln T``."""
        p = self.params
        return p.T ** (-(1 + p.gamma)) * self(p.A * p.T ** (-p.gamma) + np.asarray(xi, float))

    def validate(self, s: ArrayLike) -> None:
        """Strict ceiling ``w0 < (n-1)(n-2) T`` and the logarithmic tail."""
        p = self.params
        s = np.asarray(s, float)
        w = self(s)
        if np.any(~(w < p.cyl * p.T)) or np.any(~(w > 0)):
            raise ValueError("data violate the ceiling w0 < (n-1)(n-2)T or positivity")
        far = s[s > self.s_c + 40 * self.delta]
        if far.size:
            ref = p.cyl * (p.T - (far / p.A) ** (-1 / p.gamma))
            pos = ref > 0
            gap = np.abs(self(far[pos]) - ref[pos])
            bound = p.cyl * far[pos] ** (-1 / p.gamma - 1)
            if np.any(gap > bound):
                raise ValueError("data tail departs from the logarithmic profile beyond the allowed order")


def condition_ii_data(params: FlowParams, s_c: float | None = None, *, delta: float = 0.5,
                      floor_height: float = 6.0) -> ConditionIIData:
    """Data of the admissible class placed so the tip ``A T^{-gamma}`` is at ``xi = 0``.

    ``s_c`` defaults to two units below the tip; the floor rises to
    ``floor_height`` in rescaled units around the tip.
    """
    p = params
    tip = p.A * p.T ** (-p.gamma)
    s_c = tip - 2.0 if s_c is None else float(s_c)
    if not s_c > 0 or not delta > 0:
        raise ValueError("s_c and delta must be positive")
    f_max = floor_height * p.T ** (1 + p.gamma) / p.cyl
    if not f_max < p.T:
        raise ValueError("floor height exceeds the ceiling")
    return ConditionIIData(p, s_c, delta, tip, f_max)


def init_condition_ii(params: FlowParams, s_c: float | None = None, *, xi_min: float = -8.0, xi_max: float = 12.0,
                      nodes: int = 801, mode: Mode = "rescaled-xitau", **kw: Any) -> FlowState:
    """Condition-ii data sampled around the tip, in rescaled or cylindrical form."""
    data = condition_ii_data(params, s_c, **kw)
    tip = params.A * params.T ** (-params.gamma)
    xi = uniform_grid(xi_min, xi_max, nodes)
    data.validate(np.concatenate([tip + xi, tip + np.geomspace(1.0, 1e6, 200)]))
    if mode == "rescaled-xitau":
        return FlowState(mode, -math.log(params.T), xi, data.rescaled(xi), Boundary(2.0, "tail"),
                         stats={"data": asdict(data) | {"params": params.as_dict()}})
    return FlowState(mode, 0.0, tip + xi, data(tip + xi), Boundary(2.0, "robin", 0.0))


# ---------------------------------------------------------------------------
# runs


@dataclass(frozen=True)
class RunConfig:
    params: FlowParams
    initial_data: Literal["from-barrier-midpoint", "from-condition-ii", "custom-file"] = "from-barrier-midpoint"
    xi_min: float = -8.0
    xi_max: float = 12.0
    nodes: int = 801
    dt_min: float = DT_MIN
    dt_max: float = DT_MAX
    dt_start: float = 1e-4
    cfl: float = 0.5
    tau_start: float | None = None
    tau_span: float = 6.0
    cadence: float = 0.1
    custom_file: str | None = None
    check_corridor: bool = True

    def __post_init__(self) -> None:
        if not self.tau_span > 0:
            raise ValueError("tau_end must exceed tau_start")
        if self.xi_min > -6:
            raise ValueError("xi_min must be at most -6")
        if not 0 < self.dt_min <= self.dt_start <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_start <= dt_max")
        if self.initial_data == "custom-file" and not self.custom_file:
            raise ValueError("custom-file data needs custom_file")

    def as_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["params"] = self.params.as_dict()
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Snapshot:
    tau: float
    t: float
    grid: FloatArray
    values: FloatArray
    sandwich: float | None = None


@dataclass
class RunResult:
    config: RunConfig
    snapshots: list[Snapshot]
    steps: int
    rejections: int
    max_newton: int
    aborted: str | None = None
    barrier_tuning: dict[str, float] | None = None

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]

    @property
    def worst_sandwich(self) -> float | None:
        vals = [s.sandwich for s in self.snapshots if s.sandwich is not None]
        return max(vals) if vals else None

    def manifest(self) -> dict[str, Any]:
        return {
            "config_sha256": self.config.digest(),
            "config": self.config.as_dict(),
            "steps": self.steps,
            "rejections": self.rejections,
            "max_newton_iterations": self.max_newton,
            "snapshots": len(self.snapshots),
            "tau_range": [self.snapshots[0].tau, self.snapshots[-1].tau],
            "worst_sandwich": self.worst_sandwich,
            "abort_reason": self.aborted,
            "barrier_tuning": self.barrier_tuning,
        }


def sandwich_check(state: FlowState | Snapshot, barrier: Any) -> float:
    """Largest barrier-relative violation; negative means strictly inside."""
    if isinstance(state, FlowState):
        xi, w, tau = state.grid, state.values, state.time
    else:
        xi, w, tau = state.grid, state.values, state.tau
    up = barrier.composite(xi, tau, "+")
    lo = barrier.composite(xi, tau, "-")
    return float(max(np.max((w - up) / up), np.max((lo - w) / lo)))


def load_custom(path: str | Path) -> tuple[FloatArray, FloatArray, float]:
    """Read an inner-coordinate profile CSV written by ``Profile.to_csv``."""
    from .coords import Coord, Profile

    prof = Profile.from_csv(path)
    if prof.coord != Coord.INNER:
        raise ValueError("custom initial data must be in inner (xi) coordinates")
    return np.asarray(prof.grid), np.asarray(prof.values), float(prof.time)


def _stationary_rate(state: FlowState, params: FlowParams) -> float:
    """CFL-like bound ``min wbar/|wbar_tau|`` from the current state."""
    w, h = state.values, state.h
    n, g = params.n, params.gamma
    d1 = np.gradient(w, h)
    d2 = np.zeros_like(w)
    d2[1:-1] = (w[:-2] - 2 * w[1:-1] + w[2:]) / h**2
    Q = (n - 1) * (d2 / w + params.threshold * d1**2 / w**2) - params.cyl + params.speed * d1
    rate = np.abs((1 + g) * w + math.exp(g * state.time) * Q)[1:-1]
    return float(np.min(w[1:-1] / np.maximum(rate, 1e-300)))


def run(config: RunConfig, barrier: Any | None = None, state: FlowState | None = None,
        progress: Callable[[FlowState], None] | None = None) -> RunResult:
    """Integrate in rescaled mode from the configured data to ``tau_start + tau_span``.

    The time step obeys ``dt_min <= dt <= dt_max``, is halved on rejection,
    doubled after 20 accepted steps and capped by ``cfl`` times the stationary
    rate bound.  Snapshots are taken every ``cadence`` in ``tau``; a sandwich
    check runs at every snapshot when a barrier is given.  The right boundary
    value is checked against the outer corridor at every step.
    """
    p = config.params
    if state is None:
        if config.initial_data == "from-barrier-midpoint":
            if barrier is None:
                raise ValueError("barrier-midpoint data need a barrier")
            state = init_from_barrier_mid(barrier, config.tau_start, xi_min=config.xi_min,
                                          xi_max=config.xi_max, nodes=config.nodes)
        elif config.initial_data == "from-condition-ii":
            state = init_condition_ii(p, xi_min=config.xi_min, xi_max=config.xi_max, nodes=config.nodes)
        else:
            xi, w, tau = load_custom(config.custom_file or "")
            state = FlowState("rescaled-xitau", tau if config.tau_start is None else config.tau_start, xi, w)
    if state.mode != "rescaled-xitau":
        raise ValueError("run integrates rescaled states; use step for cylindrical mode")
    tau_end = state.time + config.tau_span
    T = p.T

    def snap(st: FlowState) -> Snapshot:
        sw = sandwich_check(st, barrier) if barrier is not None else None
        return Snapshot(st.time, T - math.exp(-st.time), st.grid.copy(), st.values.copy(), sw)

    snaps = [snap(state)]
    next_snap = state.time + config.cadence
    dt = config.dt_start
    accepted = steps = rejections = max_newton = 0
    aborted = None
    while state.time < tau_end - 1e-12:
        if config.check_corridor:
            lo, mid, up = corridor(float(state.grid[-1]), state.time, p)
            if not lo < mid < up:
                aborted = (f"right boundary left the outer corridor at tau={state.time:.6g}: "
                           f"lower={lo:.10g} value={mid:.10g} upper={up:.10g}")
                break
        cap = min(config.dt_max, max(config.dt_min, config.cfl * _stationary_rate(state, p)))
        h = min(dt, cap, next_snap - state.time, tau_end - state.time)
        h = max(h, min(config.dt_min, tau_end - state.time))
        try:
            new = step(state, h, p, dt_min=min(config.dt_min, h))
        except StepFailure as exc:
            aborted = f"step failure at tau={state.time:.6g}: {exc}"
            break
        steps += 1
        rejections += new.stats["rejections"]
        max_newton = max(max_newton, new.stats["newton_iterations"])
        if new.stats["rejections"]:
            dt = new.stats["dt"]
            accepted = 0
        else:
            accepted += 1
            if accepted >= 20:
                dt = min(2 * dt, config.dt_max)
                accepted = 0
        state = new
        if progress is not None:
            progress(state)
        if state.time >= next_snap - 1e-12 or state.time >= tau_end - 1e-12:
            snaps.append(snap(state))
            next_snap = state.time + config.cadence
    tuning = barrier.tuning() if barrier is not None else None
    return RunResult(config, snaps, steps, rejections, max_newton, aborted, tuning)
