"""Flow parameters, coordinate systems and curvature of radial conformal metrics.

A radial metric ``g = u^{1-m} |dx|^2`` on R^n can be written in three further
ways, all sampled on 1D grids:

* cylindrical ``w(s, t) = r^2 u^{1-m}`` with ``s = ln r``;
* outer ``what(eta, tau) = (T-t)^{-1} w`` with ``eta = (T-t)^gamma s`` and
  ``tau = -ln(T-t)``;
* inner ``wbar(xi, tau) = e^{gamma tau} what(A + e^{-gamma tau} xi, tau)``.

Everything in this module is a pure function returning fresh objects.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

FloatArray = NDArray[np.float64]


class Coord(str, enum.Enum):
    RADIAL = "radial-r"
    CYLINDRICAL = "cylindrical-s"
    OUTER = "outer-eta"
    INNER = "inner-xi"


class TimeKind(str, enum.Enum):
    T = "t"
    TAU = "tau"


@dataclass(frozen=True)
class FlowParams:
    """Dimension, exponents and barrier constants of one experiment."""

    n: int
    gamma: float
    A: float
    T: float
    theta_plus: float
    theta_minus: float
    eps: float = 0.05
    xi0: float = 1.0
    xi1: float = 2.0
    tau0: float = 4.0

    @property
    def m(self) -> float:
        return (self.n - 2) / (self.n + 2)

    @property
    def cbar(self) -> float:
        return 4.0 * (self.n - 1) / (self.n - 2)

    @property
    def threshold(self) -> float:
        """Critical value (n-6)/4 separating sub- and supersolution thetas."""
        return (self.n - 6) / 4.0

    @property
    def cyl(self) -> float:
        """Cylinder constant (n-1)(n-2)."""
        return float((self.n - 1) * (self.n - 2))

    @property
    def speed(self) -> float:
        """Soliton speed gamma*A."""
        return self.gamma * self.A

    @property
    def slope(self) -> float:
        """Far-field slope (n-1)(n-2)/(gamma A) of the soliton."""
        return self.cyl / self.speed

    def as_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "gamma": self.gamma,
            "A": self.A,
            "T": self.T,
            "theta_plus": self.theta_plus,
            "theta_minus": self.theta_minus,
            "eps": self.eps,
            "xi0": self.xi0,
            "xi1": self.xi1,
            "tau0": self.tau0,
        }


def make_params(
    n: int,
    gamma: float = 1.0,
    A: float = 1.0,
    T: float = 1.0,
    overrides: Mapping[str, float] | None = None,
) -> FlowParams:
    """Validate inputs and fill defaults ``theta_pm = (n-6)/4 +- 1/2``."""
    if int(n) != n or n < 3:
        raise ValueError(f"n must be an integer >= 3, got {n!r}")
    for name, value in (("gamma", gamma), ("A", A), ("T", T)):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value!r}")
    n = int(n)
    thr = (n - 6) / 4.0
    values: dict[str, float] = {"theta_plus": thr + 0.5, "theta_minus": thr - 0.5}
    extra = dict(overrides or {})
    unknown = set(extra) - {"theta_plus", "theta_minus", "eps", "xi0", "xi1", "tau0"}
    if unknown:
        raise ValueError(f"unknown parameter overrides: {sorted(unknown)}")
    values.update({k: float(v) for k, v in extra.items()})
    params = FlowParams(n=n, gamma=float(gamma), A=float(A), T=float(T), **values)
    if not 0.0 < params.eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {params.eps}")
    if not params.theta_minus < thr < params.theta_plus:
        raise ValueError(
            f"need theta_minus < {thr} < theta_plus, got "
            f"{params.theta_minus}, {params.theta_plus}"
        )
    if not params.xi1 > params.xi0 > 0:
        raise ValueError(f"need xi1 > xi0 > 0, got xi0={params.xi0}, xi1={params.xi1}")
    return params


@dataclass(frozen=True)
class Profile:
    """A positive conformal factor sampled on a strictly increasing grid."""

    coord: Coord
    time_kind: TimeKind
    time: float
    grid: FloatArray
    values: FloatArray

    def __post_init__(self) -> None:
        grid = np.array(self.grid, dtype=float)
        values = np.array(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise ValueError("grid and values must be 1D arrays of equal length")
        if grid.size < 3:
            raise ValueError("a profile needs at least 3 nodes")
        if not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(values > 0) or not np.all(np.isfinite(values)):
            raise ValueError("profile values must be finite and positive")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "coord", Coord(self.coord))
        object.__setattr__(self, "time_kind", TimeKind(self.time_kind))

    def to_csv(self, path: str | Path) -> None:
        header = f"# coord={self.coord.value} time={self.time_kind.value}:{self.time!r}\n"
        lines = [header, "x,value\n"]
        lines += [f"{x:.17g},{v:.17g}\n" for x, v in zip(self.grid, self.values)]
        Path(path).write_text("".join(lines))

    @classmethod
    def from_csv(cls, path: str | Path) -> "Profile":
        text = Path(path).read_text().splitlines()
        meta = dict(item.split("=", 1) for item in text[0].lstrip("# ").split())
        kind, value = meta["time"].split(":", 1)
        data = np.loadtxt(text[2:], delimiter=",", ndmin=2)
        return cls(Coord(meta["coord"]), TimeKind(kind), float(value), data[:, 0], data[:, 1])


@dataclass(frozen=True)
class CurvatureField:
    grid: FloatArray
    R: FloatArray
    rmNorm: FloatArray
    meta: dict[str, str] = field(
        default_factory=lambda: {"rmNorm": "convention R/sqrt(n(n-1)), exact only at an isotropic point"}
    )


def _require(profile: Profile, coord: Coord) -> None:
    if profile.coord is not coord:
        raise ValueError(f"expected a {coord.value} profile, got {profile.coord.value}")


def u_to_w(u: Profile, params: FlowParams) -> Profile:
    """Radial factor ``u(r)`` to the cylindrical factor ``w(s) = r^2 u^{1-m}``."""
    _require(u, Coord.RADIAL)
    if u.grid[0] <= 0:
        raise ValueError("the r-grid must be strictly positive for the cylindrical map")
    w = u.grid**2 * u.values ** (1.0 - params.m)
    return Profile(Coord.CYLINDRICAL, u.time_kind, u.time, np.log(u.grid), w)


def w_to_u(w: Profile, params: FlowParams) -> Profile:
    """Inverse of :func:`u_to_w`."""
    _require(w, Coord.CYLINDRICAL)
    r = np.exp(w.grid)
    return Profile(Coord.RADIAL, w.time_kind, w.time, r, (w.values / r**2) ** (1.0 / (1.0 - params.m)))


def w_to_outer(w: Profile, t: float, params: FlowParams) -> Profile:
    """``what = (T-t)^{-1} w`` on ``eta = (T-t)^gamma s``, tagged with tau."""
    _require(w, Coord.CYLINDRICAL)
    if not t < params.T:
        raise ValueError(f"t={t} must precede the blow-up time T={params.T}")
    lam = params.T - t
    return Profile(Coord.OUTER, TimeKind.TAU, -math.log(lam), lam**params.gamma * w.grid, w.values / lam)


def outer_to_w(what: Profile, params: FlowParams) -> Profile:
    _require(what, Coord.OUTER)
    lam = math.exp(-what.time)
    return Profile(Coord.CYLINDRICAL, TimeKind.T, params.T - lam, what.grid / lam**params.gamma, what.values * lam)


def outer_to_inner(
    what: Profile, tau: float, params: FlowParams, xi: ArrayLike | None = None, A: float | None = None
) -> Profile:
    """``wbar(xi) = e^{gamma tau} what(A + e^{-gamma tau} xi)``.

    Without ``xi`` the map is node-wise.  With ``xi`` the outer profile is
    interpolated (cubic in the eta variable) and requested nodes outside the
    transformed grid raise.  ``A`` may be overridden (``A = 0`` in tests).
    """
    _require(what, Coord.OUTER)
    a = params.A if A is None else A
    scale = math.exp(params.gamma * tau)
    nodes = (what.grid - a) * scale
    if xi is None:
        return Profile(Coord.INNER, TimeKind.TAU, tau, nodes, scale * what.values)
    xi = np.asarray(xi, dtype=float)
    if xi.min() < nodes[0] or xi.max() > nodes[-1]:
        raise ValueError("requested xi outside the transformed grid range")
    from scipy.interpolate import CubicSpline

    spline = CubicSpline(what.grid, what.values)
    return Profile(Coord.INNER, TimeKind.TAU, tau, xi, scale * spline(a + xi / scale))


def inner_to_outer(wbar: Profile, params: FlowParams) -> Profile:
    _require(wbar, Coord.INNER)
    scale = math.exp(params.gamma * wbar.time)
    return Profile(Coord.OUTER, TimeKind.TAU, wbar.time, params.A + wbar.grid / scale, wbar.values / scale)


def w_to_inner(w: Profile, t: float, params: FlowParams) -> Profile:
    """Direct form ``wbar(xi, tau) = e^{(1+gamma)tau} w(A e^{gamma tau} + xi)``."""
    _require(w, Coord.CYLINDRICAL)
    tau = -math.log(params.T - t)
    xi = w.grid - params.A * math.exp(params.gamma * tau)
    return Profile(Coord.INNER, TimeKind.TAU, tau, xi, math.exp((1 + params.gamma) * tau) * w.values)


def inner_to_w(wbar: Profile, params: FlowParams) -> Profile:
    _require(wbar, Coord.INNER)
    tau = wbar.time
    s = wbar.grid + params.A * math.exp(params.gamma * tau)
    return Profile(Coord.CYLINDRICAL, TimeKind.T, params.T - math.exp(-tau), s,
                   math.exp(-(1 + params.gamma) * tau) * wbar.values)


# ---------------------------------------------------------------------------
# finite differences


def _lagrange_derivs(x: FloatArray, f: FloatArray, x0: float) -> tuple[float, float]:
    """First and second derivative at ``x0`` of the interpolant through (x, f)."""
    dx = x - x0
    vander = np.vander(dx, len(dx), increasing=True)
    coef = np.linalg.solve(vander, f)
    return float(coef[1]), float(2.0 * coef[2])


def derivatives(x: ArrayLike, f: ArrayLike, even_at_zero: bool = False) -> tuple[FloatArray, FloatArray]:
    """Second-order first and second derivatives on a possibly non-uniform grid.

    Interior nodes use the three-point formulas.  End nodes use the cubic
    through the four nearest nodes, except a node at ``x = 0`` with
    ``even_at_zero`` where the mirror node ``f(-x1) = f(x1)`` is used.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    d1 = np.empty_like(f)
    d2 = np.empty_like(f)
    d1[1:-1] = (hm**2 * f[2:] - hp**2 * f[:-2] + (hp**2 - hm**2) * f[1:-1]) / (hm * hp * (hm + hp))
    d2[1:-1] = 2.0 * (hm * f[2:] - (hm + hp) * f[1:-1] + hp * f[:-2]) / (hm * hp * (hm + hp))
    if even_at_zero and x[0] == 0.0:
        d1[0] = 0.0
        d2[0] = 2.0 * (f[1] - f[0]) / x[1] ** 2
    else:
        d1[0], d2[0] = _lagrange_derivs(x[:4], f[:4], x[0])
    d1[-1], d2[-1] = _lagrange_derivs(x[-4:], f[-4:], x[-1])
    return d1, d2


def radial_laplacian(r: ArrayLike, f: ArrayLike, n: int) -> FloatArray:
    """``f'' + (n-1) f'/r`` with ``n f''(0)`` at the origin (even extension)."""
    r = np.asarray(r, dtype=float)
    d1, d2 = derivatives(r, f, even_at_zero=True)
    out = np.empty_like(d2)
    pos = r > 0
    out[pos] = d2[pos] + (n - 1) * d1[pos] / r[pos]
    out[~pos] = n * d2[~pos]
    return out


def scalar_curvature(u: Profile, params: FlowParams) -> CurvatureField:
    """``R = -cbar u^{-1} Delta u^m`` for ``g = u^{1-m}|dx|^2`` (flat background)."""
    _require(u, Coord.RADIAL)
    if u.grid.size < 5:
        raise ValueError("curvature stencil needs at least 5 nodes")
    if u.grid[0] < 0:
        raise ValueError("radial grid must be non-negative")
    lap = radial_laplacian(u.grid, u.values**params.m, params.n)
    R = -params.cbar * lap / u.values
    return CurvatureField(u.grid.copy(), R, R / math.sqrt(params.n * (params.n - 1)))


def cylindrical_curvature(x: ArrayLike, w: ArrayLike, n: int) -> FloatArray:
    """Scalar curvature of ``w (ds^2 + g_sphere)`` from FD of ``phi = ln w``.

    ``R = (n-1) e^{-phi} [ (n-2)(4 - phi'^2)/4 - phi'' ]``.  Working with the
    logarithm keeps the relative accuracy where ``w ~ e^{2s}`` is tiny.
    """
    phi = np.log(np.asarray(w, dtype=float))
    d1, d2 = derivatives(x, phi)
    return (n - 1) * np.exp(-phi) * ((n - 2) * (2.0 - d1) * (2.0 + d1) / 4.0 - d2)


def curvature_consistency(u0: Profile, u1: Profile, params: FlowParams) -> float:
    """Relative defect of ``d_t u^{1-m} = -R u^{1-m}`` between two snapshots.

    The time derivative is the forward difference; curvature is averaged over
    the two time levels (trapezoid, second order in dt).  Interior nodes only.
    """
    _require(u0, Coord.RADIAL)
    _require(u1, Coord.RADIAL)
    if u0.grid.shape != u1.grid.shape or not np.array_equal(u0.grid, u1.grid):
        raise ValueError("snapshots must share their grid")
    dt = u1.time - u0.time
    if dt <= 0:
        raise ValueError("second snapshot must be later than the first")
    p = 1.0 - params.m
    g0, g1 = u0.values**p, u1.values**p
    Rg = 0.5 * (scalar_curvature(u0, params).R * g0 + scalar_curvature(u1, params).R * g1)
    defect = (g1 - g0) / dt + Rg
    defect, Rg = defect[1:-1], Rg[1:-1]
    scale = np.abs(Rg)
    if np.all(scale == 0) and np.all(defect == 0):
        return 0.0
    floor = 1e-300 + 1e-14 * scale.max(initial=0.0)
    return float(np.max(np.abs(defect) / np.maximum(scale, floor)))


def with_time(profile: Profile, time: float) -> Profile:
    return replace(profile, time=time)
