"""Curvature series, blow-up fits, soliton distances, shift fits and reports.

In rescaled coordinates the physical curvature is ``R = e^{(1+gamma)tau} Rbar``
with ``Rbar`` the curvature of ``wbar (ds^2 + g_sphere)``; the rows of a
``BlowupSeries`` therefore store ``(T-t)^{1+gamma} R = Rbar`` directly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from . import soliton as sol
from .coords import FlowParams, cylindrical_curvature
from .outer import what0_d

FloatArray = NDArray[np.float64]

SCHEMA_VERSION = "1.0"
ORIGIN_OFFSET = 3.0
TAIL_ETA_FACTOR = 3.0


class FitError(ValueError):
    """A fit could not be performed on the supplied data."""


# ---------------------------------------------------------------------------
# curvature series


@dataclass(frozen=True)
class BlowupFit:
    exponent: float
    constant: float
    exponent_se: float
    constant_se: float
    window: tuple[float, float]
    rows: int
    residual: float
    monotone: bool
    constant_rm: float

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class BlowupSeries:
    """Rows ``(tau, t, (T-t)^{1+gamma} sup R, (T-t)^{1+gamma} R(0), argmax xi)``."""

    params: FlowParams
    tau: FloatArray
    t: FloatArray
    sup_scaled: FloatArray
    origin_scaled: FloatArray
    argmax_xi: FloatArray
    fit: BlowupFit | None = None

    def __post_init__(self) -> None:
        if np.any(self.sup_scaled < self.origin_scaled):
            raise ValueError("sup R must dominate R at the origin row-wise")

    @property
    def sup_R(self) -> FloatArray:
        """Physical ``sup R``."""
        return self.sup_scaled * np.exp((1 + self.params.gamma) * self.tau)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["tau", "t", "scaled_sup_R", "scaled_R_origin", "argmax_xi"])
        for row in zip(self.tau, self.t, self.sup_scaled, self.origin_scaled, self.argmax_xi):
            wr.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()


def snapshot_curvature(xi: ArrayLike, wbar: ArrayLike, params: FlowParams,
                       offset: float = ORIGIN_OFFSET, right_margin: float = 1.0) -> tuple[float, float, float]:
    """``(sup Rbar, Rbar at the origin, argmax xi)`` for one rescaled profile.

    The origin value is read ``offset`` units inside the left edge, where the
    profile is already in its ``e^{2 xi}`` regime; the supremum is taken from
    there to ``right_margin`` short of the right edge.
    """
    xi = np.asarray(xi, float)
    w = np.asarray(wbar, float)
    R = cylindrical_curvature(xi, w, params.n)
    mask = (xi >= xi[0] + offset - 1e-12) & (xi <= xi[-1] - right_margin)
    if mask.sum() < 5:
        raise FitError("snapshot grid too coarse for the curvature stencil")
    i0 = int(np.flatnonzero(mask)[0])
    sub = np.flatnonzero(mask)
    j = int(sub[np.argmax(R[sub])])
    return float(R[j]), float(R[i0]), float(xi[j])


def curvature_series(snapshots: Iterable[Any], params: FlowParams, offset: float = ORIGIN_OFFSET) -> BlowupSeries:
    """Curvature rows for rescaled snapshots (objects with ``tau, grid, values``)."""
    rows = []
    for sn in snapshots:
        sup, org, arg = snapshot_curvature(sn.grid, sn.values, params, offset)
        t = params.T - math.exp(-sn.tau)
        rows.append((sn.tau, t, sup, org, arg))
    if not rows:
        raise FitError("no snapshots")
    a = np.array(rows, float)
    return BlowupSeries(params, a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4])


def default_window(tau: FloatArray) -> tuple[float, float]:
    """Last 1.5 decades of ``T - t`` after dropping the first 20% of rows."""
    if tau.size == 0:
        raise FitError("empty series")
    start = tau[int(math.floor(0.2 * tau.size))]
    lo = max(float(start), float(tau[-1]) - 1.5 * math.log(10.0))
    return lo, float(tau[-1])


def fit_blowup(series: BlowupSeries, window: tuple[float, float] | None = None, which: str = "sup") -> BlowupFit:
    """Least squares of ``ln R = -p ln(T-t) + ln c`` on the rows in ``window``.

    ``ln(T-t) = -tau``, and ``which`` picks the supremum or the origin value.
    The rmNorm constant is ``c / sqrt(n(n-1))``.
    """
    win = default_window(series.tau) if window is None else (float(window[0]), float(window[1]))
    sel = (series.tau >= win[0] - 1e-12) & (series.tau <= win[1] + 1e-12)
    if sel.sum() < 8:
        raise FitError(f"need at least 8 rows in the window, found {int(sel.sum())}")
    scaled = series.sup_scaled if which == "sup" else series.origin_scaled
    tau = series.tau[sel]
    y = np.log(scaled[sel]) + (1 + series.params.gamma) * tau
    X = np.column_stack([tau, np.ones_like(tau)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    dof = max(tau.size - 2, 1)
    s2 = float(res @ res) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    p, lnc = float(coef[0]), float(coef[1])
    c = math.exp(lnc)
    monotone = bool(np.all(np.diff(y) >= 0) or np.all(np.diff(y) <= 0))
    fit = BlowupFit(p, c, float(math.sqrt(cov[0, 0])), float(c * math.sqrt(cov[1, 1])), win, int(tau.size),
                    float(np.max(np.abs(res))), monotone, c / math.sqrt(series.params.n * (series.params.n - 1)))
    series.fit = fit
    return fit


def tail_ratio(params: FlowParams, tau: float, eta: ArrayLike | None = None) -> float:
    """``(T-t) sup R`` over the far cylindrical tail ``eta >= 3A`` from the outer profile.

    ``(T-t) R = (n-1)/what0 [(n-2) - e^{-2 gamma tau}(what0''/what0 + (n-6)/4 (what0'/what0)^2)]``.
    """
    A = params.A
    eta = np.geomspace(TAIL_ETA_FACTOR * A, 1e5 * A, 400) if eta is None else np.asarray(eta, float)
    w, wp, wpp = what0_d(eta - A, params)
    e2 = math.exp(-2 * params.gamma * tau)
    val = (params.n - 1) / w * ((params.n - 2) - e2 * (wpp / w + params.threshold * (wp / w) ** 2))
    return float(np.max(val))


# ---------------------------------------------------------------------------
# soliton distance


def soliton_distance(xi: ArrayLike, wbar: ArrayLike, profile: sol.SolitonProfile,
                     window: tuple[float, float] = (-5.0, 10.0), search: float = 3.0) -> tuple[float, float]:
    """``min_c sup_window |wbar(xi) - wbar0(xi + c)|`` and the minimizing ``c``.

    A coarse pre-scan locates the basin (and checks it has one local
    minimum); golden-section search then refines the shift.
    """
    xi = np.asarray(xi, float)
    w = np.asarray(wbar, float)
    if window[0] < xi[0] - 1e-12 or window[1] > xi[-1] + 1e-12:
        raise FitError("window exceeds the snapshot grid")
    m = (xi >= window[0] - 1e-12) & (xi <= window[1] + 1e-12)
    xs, ws = xi[m], w[m]

    def obj(c: float) -> float:
        return float(np.max(np.abs(ws - sol.eval(profile, xs + c))))

    cs = np.linspace(-search, search, 601)
    vals = np.array([obj(c) for c in cs])
    k = int(np.argmin(vals))
    k = min(max(k, 1), cs.size - 2)
    res = optimize.minimize_scalar(obj, bracket=(cs[k - 1], cs[k], cs[k + 1]), method="golden",
                                   options={"xtol": 1e-15, "maxiter": 10000})
    c = float(res.x)
    return c, obj(c)


def prescan_minima(values: Sequence[float]) -> int:
    """Number of strict interior local minima of a sampled objective."""
    v = np.asarray(values, float)
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


# ---------------------------------------------------------------------------
# shift fits


def _bisect_edge(admissible: Any, bad: float, good: float, tol: float) -> float:
    """Move ``good`` toward ``bad`` while keeping ``admissible(good)`` true."""
    while abs(good - bad) > tol:
        mid = 0.5 * (good + bad)
        if admissible(mid):
            good = mid
        else:
            bad = mid
    return good


def fit_shifts(xi: ArrayLike, data: ArrayLike, barrier: Any, tau: float, *, lo: float = -20.0, hi: float = 20.0,
               coarse: float = 0.25, tol: float = 1e-10) -> tuple[float, float]:
    """Smallest ``xi_a`` and largest ``xi_b`` with

    ``w+(xi - gamma A xi_a) <= data <= w-(xi - gamma A xi_b)`` at every node.

    Data must satisfy the ceiling ``wbar < (n-1)(n-2) e^{gamma tau}``.
    """
    from .barrier import shifted

    p = barrier.params
    xi = np.asarray(xi, float)
    w = np.asarray(data, float)
    if np.any(~(w > 0)) or np.any(~(w < p.cyl * math.exp(p.gamma * tau))):
        raise FitError("data outside the admissible class (ceiling or positivity violated)")

    def below(c: float) -> float:
        return float(np.max(shifted(barrier, c).composite(xi, tau, "+") - w))

    def above(c: float) -> float:
        return float(np.max(w - shifted(barrier, c).composite(xi, tau, "-")))

    grid = np.arange(lo, hi + coarse / 2, coarse)
    ok_a = np.array([below(c) <= 0 for c in grid])
    ok_b = np.array([above(c) <= 0 for c in grid])
    ia = np.flatnonzero(ok_a)
    ib = np.flatnonzero(ok_b)
    if ia.size == 0 or ib.size == 0:
        raise FitError("no admissible shift in the search range")
    xi_a = float(grid[ia[0]])
    if ia[0] > 0:
        xi_a = _bisect_edge(lambda c: below(c) <= 0, float(grid[ia[0] - 1]), xi_a, tol)
    xi_b = float(grid[ib[-1]])
    if ib[-1] + 1 < grid.size:
        xi_b = _bisect_edge(lambda c: above(c) <= 0, float(grid[ib[-1] + 1]), xi_b, tol)
    if not xi_a > xi_b:
        raise FitError(f"shift ordering failed: xi_a={xi_a} <= xi_b={xi_b}")
    return xi_a, xi_b


# ---------------------------------------------------------------------------
# reports


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


REPORT_SECTIONS = ("params", "barrier", "scans", "fit", "soliton_distance", "shift_fit", "run")


@dataclass
class Report:
    sections: dict[str, Any] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        present = {k: self.sections.get(k) for k in REPORT_SECTIONS}
        body = {
            "schema_version": SCHEMA_VERSION,
            "sections": _clean(present),
            "absent_sections": [k for k in REPORT_SECTIONS if self.sections.get(k) is None],
            "manifest": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(self.files.items())},
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"


def report(out_dir: str | Path | None = None, **sections: Any) -> Report:
    """Assemble a deterministic bundle; ``files`` maps names to CSV text.

    Missing sections are listed by name under ``absent_sections``.  When
    ``out_dir`` is given the CSV files and ``report.json`` are written there.
    """
    files = dict(sections.pop("files", None) or {})
    unknown = set(sections) - set(REPORT_SECTIONS)
    if unknown:
        raise ValueError(f"unknown report sections: {sorted(unknown)}")
    rep = Report(sections={k: v for k, v in sections.items() if v is not None}, files=files)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in sorted(files.items()):
            (out / name).write_text(text)
        (out / "report.json").write_text(rep.to_json())
    return rep
