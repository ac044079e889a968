"""Command line interface.

Exit codes: 0 when every check passes, 2 when violations were found and 1 on
execution errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import barrier as bar
from . import diagnostics as diag
from . import flow
from . import soliton as sol
from .coords import Coord, FlowParams, Profile, TimeKind, make_params
from .outer import build_w1, build_w2, lemma_constants

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


def load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    text = p.read_bytes()
    if p.suffix.lower() == ".toml":
        return tomllib.loads(text.decode())
    return json.loads(text)


def params_from(cfg: dict[str, Any]) -> FlowParams:
    pc = dict(cfg.get("params", {}))
    n = pc.pop("n", 5)
    gamma = pc.pop("gamma", 1.0)
    A = pc.pop("A", 1.0)
    T = pc.pop("T", 1.0)
    return make_params(n, gamma, A, T, pc)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _dump(obj: Any) -> str:
    return json.dumps(diag._clean(obj), sort_keys=True, indent=2) + "\n"


def _tuned(params: FlowParams, cfg: dict[str, Any], args: argparse.Namespace | None = None) -> bar.TuneResult:
    bc = dict(cfg.get("barrier", {}))
    eps = getattr(args, "eps", None) if args is not None else None
    eps = bc.get("eps", params.eps) if eps is None else eps
    corridor_xi = bc.get("corridor_xi", cfg.get("run", {}).get("xi_max", 12.0))
    return bar.auto_tune(params, eps=eps, corridor_xi=corridor_xi)


# ---------------------------------------------------------------------------
# subcommands


def cmd_soliton(args: argparse.Namespace, cfg: dict[str, Any], out: Path) -> int:
    params = params_from(cfg)
    prof = sol.solve_soliton(params)
    xi, w, wp = prof.table.T
    lines = ["xi,w,w_xi"] + [f"{a:.17g},{b:.17g},{c:.17g}" for a, b, c in zip(xi, w, wp)]
    _write(out, "soliton.csv", "\n".join(lines) + "\n")
    summ = sol.summary(prof)
    grid = np.linspace(-8.0, 40.0, 4801)
    summ["ode_residual_max"] = float(np.max(np.abs(prof.ode_residual(grid))))
    target = 2 * params.speed
    ok = abs(summ["kappa_residual"]) <= 1e-6 and abs(summ["R_origin"] - target) <= 1e-3 * target
    summ["ok"] = ok
    _write(out, "soliton.json", _dump(summ))
    print(_dump(summ), end="")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_barriers(args: argparse.Namespace, cfg: dict[str, Any], out: Path) -> int:
    params = params_from(cfg)
    if args.action == "build-outer":
        w1, w2 = build_w1(params), build_w2(params)
        d = np.exp(w1.x)
        a = w1.derivs_d(d)[0]
        b = w2.derivs_d(d)[0]
        head = (f"# anchor={w1.anchor!r} tol={w1.tol!r} gamma={params.gamma!r} A={params.A!r} "
                f"theta_plus={params.theta_plus!r} theta_minus={params.theta_minus!r}")
        rows = [head, "eta,w1,w2"] + [f"{params.A + x:.17g},{p:.17g},{q:.17g}" for x, p, q in zip(d, a, b)]
        _write(out, "outer_tables.csv", "\n".join(rows) + "\n")
        meta = {"plus": lemma_constants(params, params.theta_plus), "minus": lemma_constants(params, params.theta_minus)}
        _write(out, "outer_meta.json", _dump(meta))
        print(f"wrote {out / 'outer_tables.csv'} ({d.size} rows)")
        return EXIT_OK
    if args.auto_tune:
        res = _tuned(params, cfg, args)
        if res.barrier is None or res.report is None:
            print("auto-tune found no candidate", file=sys.stderr)
            return EXIT_VIOLATION
        b, rep = res.barrier, res.report
    else:
        b = bar.assemble(params, eps=args.eps, xi1=args.xi1, tau0=args.tau0, xi0=args.xi0)
        rep = bar.check_prop61(b)
    _write(out, "shifts.csv", b.shift_table_csv())
    body = {"tuning": b.tuning(), "certification": rep.to_dict()}
    _write(out, "certification.json", _dump(body))
    print(_dump({"tuning": b.tuning(), "ok": rep.ok, "violations": rep.violations}), end="")
    return EXIT_OK if rep.ok else EXIT_VIOLATION


def verify_suite(params: FlowParams, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    """Barrier certification plus a random ordering spot-check."""
    res = _tuned(params, cfg)
    out: dict[str, Any] = {"seed": seed, "tuned": res.ok}
    if res.barrier is None or res.report is None:
        out["ok"] = False
        return out
    b = res.barrier
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-10.0, 100.0, 10_000)
    ts = rng.uniform(b.tau1, b.tau1 + 8.0, 10_000)
    order = float(np.min(b.composite(xs, ts, "+") - b.composite(xs, ts, "-")))
    out.update(tuning=b.tuning(), certification=res.report.to_dict(), random_ordering_min_gap=order)
    out["ok"] = bool(res.report.ok and order > 0)
    return out


def cmd_verify(args: argparse.Namespace, cfg: dict[str, Any], out: Path) -> int:
    params = params_from(cfg)
    body = verify_suite(params, cfg, args.seed)
    _write(out, "verify.json", _dump(body))
    print(_dump({k: body[k] for k in ("ok", "tuning", "random_ordering_min_gap") if k in body}), end="")
    return EXIT_OK if body["ok"] else EXIT_VIOLATION


def run_config(params: FlowParams, cfg: dict[str, Any], initial: str | None = None) -> flow.RunConfig:
    rc = dict(cfg.get("run", {}))
    if initial is not None:
        rc["initial_data"] = initial
    return flow.RunConfig(params=params, **rc)


def execute_run(params: FlowParams, cfg: dict[str, Any], initial: str | None = None
                ) -> tuple[flow.RunResult, bar.CompositeBarrier, dict[str, Any]]:
    """Tune the barrier, then integrate from the configured data."""
    res = _tuned(params, cfg)
    if res.barrier is None or not res.ok:
        raise RuntimeError("no certified barrier for these parameters")
    b = res.barrier
    rc = run_config(params, cfg, initial)
    extra: dict[str, Any] = {}
    if rc.initial_data == "from-condition-ii":
        p2 = replace(params, T=math.exp(-b.tau1))
        rc = replace(rc, params=p2)
        st = flow.init_condition_ii(p2, xi_min=rc.xi_min, xi_max=rc.xi_max, nodes=rc.nodes)
        xa, xb = diag.fit_shifts(st.grid, st.values, b, st.time)
        extra["shift_fit"] = {"xi_a": xa, "xi_b": xb}
        result = flow.run(rc, state=st)
    else:
        result = flow.run(rc, barrier=b)
    return result, b, extra


def cmd_run(args: argparse.Namespace, cfg: dict[str, Any], out: Path) -> int:
    params = params_from(cfg)
    result, b, extra = execute_run(params, cfg, args.initial)
    snapdir = out / "snapshots"
    snapdir.mkdir(parents=True, exist_ok=True)
    for k, sn in enumerate(result.snapshots):
        Profile(Coord.INNER, TimeKind.TAU, sn.tau, sn.grid, sn.values).to_csv(snapdir / f"snap_{k:04d}.csv")
    series = diag.curvature_series(result.snapshots, result.config.params)
    _write(out, "series.csv", series.to_csv())
    manifest = result.manifest() | extra
    _write(out, "run.json", _dump(manifest))
    print(_dump({"steps": result.steps, "aborted": result.aborted, "worst_sandwich": result.worst_sandwich}), end="")
    if result.aborted:
        return EXIT_VIOLATION
    ws = result.worst_sandwich
    return EXIT_VIOLATION if ws is not None and ws > 1e-3 else EXIT_OK


def read_series(path: Path, params: FlowParams) -> diag.BlowupSeries:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return diag.BlowupSeries(params, data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4])


def cmd_fit(args: argparse.Namespace, cfg: dict[str, Any], out: Path) -> int:
    params = params_from(cfg)
    path = Path(args.series) if args.series else out / "series.csv"
    series = read_series(path, params)
    window = tuple(args.window) if args.window else None
    fit = diag.fit_blowup(series, window)
    g = params.gamma
    ok = abs(fit.exponent - (1 + g)) <= 0.05 * (1 + g) and abs(fit.constant - 2 * params.speed) <= 0.1 * 2 * params.speed
    body = fit.as_dict() | {"target_exponent": 1 + g, "target_constant": 2 * params.speed, "ok": ok}
    _write(out, "fit.json", _dump(body))
    print(_dump(body), end="")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_report(args: argparse.Namespace, cfg: dict[str, Any], out: Path) -> int:
    params = params_from(cfg)
    sections: dict[str, Any] = {"params": params.as_dict()}
    files: dict[str, str] = {}
    if args.verify_only:
        body = verify_suite(params, cfg, args.seed)
        sections["barrier"] = body.get("tuning")
        sections["scans"] = body.get("certification")
        ok = body["ok"]
    else:
        result, b, extra = execute_run(params, cfg, args.initial)
        prof = sol.solve_soliton(params)
        series = diag.curvature_series(result.snapshots, result.config.params)
        fit = diag.fit_blowup(series)
        dists = [diag.soliton_distance(s.grid, s.values, prof) for s in result.snapshots]
        sections["barrier"] = b.tuning()
        sections["scans"] = bar.check_prop61(b).to_dict()
        sections["fit"] = fit.as_dict()
        sections["soliton_distance"] = {"tau": [s.tau for s in result.snapshots],
                                        "shift": [d[0] for d in dists], "error": [d[1] for d in dists]}
        sections["shift_fit"] = extra.get("shift_fit")
        sections["run"] = result.manifest()
        files["series.csv"] = series.to_csv()
        files["shifts.csv"] = b.shift_table_csv()
        ok = sections["scans"]["ok"] and result.aborted is None
    rep = diag.report(out, files=files, **sections)
    print(f"wrote {out / 'report.json'}")
    del rep
    return EXIT_OK if ok else EXIT_VIOLATION


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="yamabe-typeii", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML or JSON configuration file")
    ap.add_argument("--out", default="out", help="output directory (default: out)")
    ap.add_argument("--seed", type=int, default=20240611, help="seed for random spot-checks")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("soliton", help="solve the steady soliton and report its constants")

    pb = sub.add_parser("barriers", help="outer tables or composite barrier assembly")
    pb.add_argument("action", choices=["build-outer", "assemble"])
    pb.add_argument("--xi0", type=float, default=None)
    pb.add_argument("--xi1", type=float, default=None)
    pb.add_argument("--eps", type=float, default=None)
    pb.add_argument("--tau0", type=float, default=None)
    pb.add_argument("--auto-tune", action="store_true")

    sub.add_parser("verify", help="certify the barriers (sign scans and structural checks)")

    pr = sub.add_parser("run", help="integrate the rescaled flow")
    pr.add_argument("--initial", choices=["from-barrier-midpoint", "from-condition-ii", "custom-file"], default=None)

    pf = sub.add_parser("fit", help="fit the blow-up law to a curvature series")
    pf.add_argument("--series", default=None, help="series CSV (default: <out>/series.csv)")
    pf.add_argument("--window", type=float, nargs=2, default=None, metavar=("TAU_LO", "TAU_HI"))

    pp = sub.add_parser("report", help="full pipeline bundle")
    pp.add_argument("--verify-only", action="store_true")
    pp.add_argument("--initial", choices=["from-barrier-midpoint", "from-condition-ii"], default=None)
    return ap


COMMANDS = {"soliton": cmd_soliton, "barriers": cmd_barriers, "verify": cmd_verify, "run": cmd_run,
            "fit": cmd_fit, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg, Path(args.out))
    except Exception as exc:  # noqa: BLE001 - reported as an execution error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
