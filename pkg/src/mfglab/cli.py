"""Command-line front end: ``mfglab run <config> [--workers N] [--out DIR] [--seed S]``.

Exit codes: 0 all checks passed, 2 an invariant check failed, 3 configuration
error, 4 solver failure.  Reports are deterministic; timestamps go only to
``run.log``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import carleman as cm
from . import inverse as inv
from .config import ConfigError, ExperimentConfig, parse_config
from .expressions import ExpressionError, parse
from .grid import build_grid, field_to_csv, integrate_interior, partition_boundary
from .operators import CoefficientError, CoefficientSet, apply_block, conjugate_operator, split_conjugate
from .solver import (LinearizedSolver, NonlinearCoefficients, NonlinearSolver, SolveOptions, SolverError,
                     SystemData, manufacture)
from .weights import CarlemanWeights, check_weight_bounds, time_factor

EXIT_PASS, EXIT_VIOLATION, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3, 4


class Run:
    """Collects checks and output files for one experiment."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.checks: list[dict] = []
        self.files: dict[str, str] = {}
        self.summary: dict = {}
        self.log: list[str] = []
        self.bundle = None

    def check(self, name: str, passed: bool, value=None, limit=None, where: str | None = None) -> bool:
        rec = {"name": name, "passed": bool(passed), "value": value, "limit": limit}
        if where is not None:
            rec["where"] = where
        self.checks.append(rec)
        return bool(passed)

    def note(self, msg: str) -> None:
        self.log.append(f"{_dt.datetime.now().isoformat(timespec='seconds')} {msg}")

    def csv_header(self) -> str:
        return f"config_hash={self.cfg.hash} seed={self.cfg.seed}"


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------


def _grid(cfg: ExperimentConfig, counts=None, nt=None):
    g = cfg["grid"]
    grid = build_grid(g["extents"], counts or g["counts"], g["T"], nt or g["nt"])
    return grid, partition_boundary(grid, g["observed"])


def _opts(cfg: ExperimentConfig) -> SolveOptions:
    s = cfg["solver"]
    return SolveOptions(theta=float(s["theta"]), tol=float(s["tol"]), max_iter=int(s["max_iter"]),
                        linear_tol=float(s["linear_tol"]))


def _data(table: dict, grid, part) -> SystemData:
    sample = {k: parse(v).sample(grid) for k, v in table.items()}
    return SystemData(grid, part, sample["value_source"], sample["density_source"],
                      part.trace(sample["value_flux"]), part.trace(sample["density_flux"]),
                      sample["value_terminal"][-1], sample["density_initial"][0])


def _l2(f, grid) -> float:
    return float(np.sqrt(integrate_interior(np.asarray(f) ** 2, grid)))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_solve(r: Run) -> None:
    cfg = r.cfg
    grid, part = _grid(cfg)
    c = CoefficientSet.from_expressions(grid, part, cfg["coefficients"])
    man = cfg["manufactured"]
    data = manufacture(man["value"], man["density"], c) if man["value"] is not None else _data(cfg["data"], grid, part)
    res = LinearizedSolver(c, _opts(cfg)).solve(data)
    r.summary.update(iterations=res.iterations, update_norms=res.update_norms,
                     contraction_ratios=res.contraction_ratios.tolist())
    if man["value"] is not None:
        eu = _l2(res.value - parse(man["value"]).sample(grid), grid)
        ev = _l2(res.density - parse(man["density"]).sample(grid), grid)
        r.summary["errors"] = {"value": eu, "density": ev}
    r.check("converged", True, res.iterations, cfg["solver"]["max_iter"])
    r.files["value.csv"] = field_to_csv(grid, res.value, header_comment=r.csv_header())
    r.files["density.csv"] = field_to_csv(grid, res.density, header_comment=r.csv_header())
    r.files["history.jsonl"] = json.dumps({"config_hash": cfg.hash}) + "\n" + res.history_jsonl()


def _refined(n: int, k: int) -> int:
    return (n - 1) * 2**k + 1


def run_manufacture(r: Run) -> None:
    cfg = r.cfg
    man, ref = cfg["manufactured"], cfg["refinement"]
    levels = int(ref["levels"])
    rows = []
    for k in range(levels):
        counts = [_refined(n, k) for n in cfg["grid"]["counts"]]
        nt = _refined(cfg["grid"]["nt"], k)
        grid, part = _grid(cfg, counts, nt)
        c = CoefficientSet.from_expressions(grid, part, cfg["coefficients"])
        res = LinearizedSolver(c, _opts(cfg)).solve(manufacture(man["value"], man["density"], c))
        err = math.hypot(_l2(res.value - parse(man["value"]).sample(grid), grid),
                         _l2(res.density - parse(man["density"]).sample(grid), grid))
        rows.append({"counts": counts, "nt": nt, "h": max(grid.h), "error": err, "iterations": res.iterations,
                     "contraction_ratios": res.contraction_ratios.tolist()})
        r.note(f"level {k}: counts={counts} nt={nt} error={err:.3e}")
    orders = [math.log(a["error"] / b["error"]) / math.log(a["h"] / b["h"]) for a, b in zip(rows, rows[1:])]
    r.summary.update(levels=rows, orders=orders)
    for i, p in enumerate(orders):
        r.check(f"order[{i}]", p >= ref["min_order"], p, ref["min_order"], where=f"levels {i}-{i + 1}")
    if ref["max_contraction"] is not None:
        worst = max((max(x["contraction_ratios"], default=0.0) for x in rows), default=0.0)
        r.check("picard_contraction", worst < ref["max_contraction"], worst, ref["max_contraction"])
    lines = ["# " + r.csv_header(), "level,h,nt,error,iterations"]
    lines += [f"{i},{row['h']!r},{row['nt']},{row['error']!r},{row['iterations']}" for i, row in enumerate(rows)]
    r.files["convergence.csv"] = "\n".join(lines) + "\n"


def run_estimate_sweep(r: Run) -> None:
    cfg = r.cfg
    grid, part = _grid(cfg)
    c = CoefficientSet.from_expressions(grid, part, cfg["coefficients"])
    est, wcfg, man = cfg["estimate"], cfg["weights"], cfg["manufactured"]
    w = CarlemanWeights(grid, part, float(wcfg["sharpness"]))
    data = manufacture(man["value"], man["density"], c)
    U, V = parse(man["value"]), parse(man["density"])
    u, v = U.sample(grid), V.sample(grid)
    fields = cm.SystemFields(u, v, data.value_source, data.density_source, data.value_flux, data.density_flux,
                             dt_value=U.diff("t").sample(grid), dt_density=V.diff("t").sample(grid),
                             dt2_value=U.diff("t", 2).sample(grid), dt2_density=V.diff("t", 2).sample(grid))
    which, tol = est["which"], float(est["residual_tol"])
    if est["field"] == "value":
        f, src, flux, ft = u, data.value_source + c.coupling * v, data.value_flux, fields.dt_value
    else:
        f, src, flux, ft = v, data.density_source + apply_block(u, c.cross, grid), data.density_flux, fields.dt_density
    kw = dict(tol=tol, dt_u=ft)
    evaluators: dict[str, Callable[[float], cm.Sides]] = {
        "scalar": lambda s: cm.scalar_estimate_sides(f, src, flux, w, s, c, est["field"], **kw),
        "scaled": lambda s: cm.scaled_estimate_sides(f, src, flux, w, s, float(est["m"]), c, est["field"], **kw),
        "first-power": lambda s: cm.first_power_estimate_sides(f, src, flux, w, s, c, est["field"], **kw),
        "system": lambda s: cm.system_estimate_sides(fields, w, s, c, tol=tol),
        "time-derivative": lambda s: cm.time_derivative_sides(fields, w, s, c, tol=tol),
        "trace": lambda s: cm.trace_estimate_sides(f, w, s, float(est["r"]))[0],
        "trace-gradient": lambda s: cm.trace_estimate_sides(f, w, s, float(est["r"]))[1],
    }
    label = which + (f"(m={float(est['m'])})" if which == "scaled" else "")
    try:
        rep = cm.sweep_s(label, evaluators[which], wcfg["s_grid"], float(wcfg["sharpness"]), workers=r.cfg.workers)
    except cm.ResidualCheckError as exc:
        r.check("input_residual", False, exc.residual, tol, where=str(exc))
        return
    r.check("input_residual", True, None, tol)
    r.summary["report"] = rep.to_dict()
    r.check("no_growth_at_top", not rep.violation, rep.growth_at_top, 0.05)
    frac = float(est["tail_fraction"])
    r.check("tail_non_increasing", rep.tail_non_increasing(frac), rep.ratios, None,
            where=f"top {frac:.0%} of the s-sweep")
    if est["max_constant"] is not None:
        r.check("constant_bound", rep.constant is None or rep.constant <= est["max_constant"], rep.constant,
                est["max_constant"])
    r.files["sweep.csv"] = rep.to_csv(r.csv_header())


def run_weight_check(r: Run) -> None:
    cfg = r.cfg
    grid, part = _grid(cfg)
    wcfg = cfg["weights"]
    w = CarlemanWeights(grid, part, float(wcfg["sharpness"]))
    T = grid.T
    t = grid.times[(grid.times > 0) & (grid.times < T)]
    late = t[t > T / 2]  # T - late is exact in floating point, so the mirror pair is exact
    sym = float(np.max(np.abs(time_factor(late, T) - time_factor(T - late, T))))
    r.check("time_factor_symmetry", sym == 0.0, sym, 0.0)
    early = t[t <= T / 4]
    dev = float(np.max(np.abs(time_factor(early, T) - early**2))) if len(early) else 0.0
    r.check("time_factor_square_branch", dev == 0.0, dev, 0.0)
    reports = []
    for p in wcfg["powers"]:
        rep = check_weight_bounds(float(p), [float(s) for s in wcfg["s_grid"]], w)
        reports.append(rep)
        r.check(f"bounded[power={p}]", not rep["violation"], rep["sup"], None)
    r.summary.update(bounds=reports, symmetry_deviation=sym, square_branch_deviation=dev)
    lines = ["# " + r.csv_header(), "power,sup,log_sup,argmax_t,s_at_sup"]
    lines += [f"{x['power']!r},{x['sup']!r},{x['log_sup']!r},{x['argmax_t']!r},{x['s_at_sup']!r}" for x in reports]
    r.files["weights.csv"] = "\n".join(lines) + "\n"


def _bump(grid, window) -> np.ndarray:
    a, b = window
    t = grid.times
    inside = (t > a) & (t < b)
    out = np.zeros_like(t)
    out[inside] = np.exp(-1.0 / ((t[inside] - a) * (b - t[inside])))
    return out.reshape((-1,) + (1,) * grid.dim)


def run_operator_identity(r: Run) -> None:
    cfg = r.cfg
    op, wcfg = cfg["operator"], cfg["weights"]
    T = float(cfg["grid"]["T"])
    window = op["window"] or [3 * T / 8, 5 * T / 8]
    ladder = op["ladder"] or [[*cfg["grid"]["counts"], cfg["grid"]["nt"]]]
    results = {}
    for s in op["s_values"]:
        rows = []
        for level in ladder:
            grid, part = _grid(cfg, level[:-1], level[-1])
            c = CoefficientSet.from_expressions(grid, part, cfg["coefficients"])
            w = CarlemanWeights(grid, part, float(wcfg["sharpness"]))
            field = parse(op["field"]).sample(grid) * _bump(grid, window)
            nw = _l2(field, grid)
            diff = _l2(conjugate_operator(field, w, c, s=float(s)).difference, grid) / nw
            row = {"counts": list(level[:-1]), "nt": level[-1], "direct_vs_numeric": diff}
            if float(s) > 0:
                U = parse(op["solution"])
                D = c.expressions["value"]["diffusion"]
                names = "xy"[: grid.dim]
                src = U.diff("t")
                for i in range(grid.dim):
                    for j in range(grid.dim):
                        src = src - D[i][j] * U.diff(names[i]).diff(names[j])
                ww = U.sample(grid) * np.exp(float(s) * w.exponent)
                sp = split_conjugate(ww, w, c, src.sample(grid), s=float(s))
                row["split_residual"] = _l2(sp.residual, grid) / _l2(ww, grid)
            rows.append(row)
        results[repr(float(s))] = rows
        for key in ("direct_vs_numeric", "split_residual"):
            vals = [row[key] for row in rows if key in row]
            if len(vals) >= 2:
                for i in range(len(vals) - 1):
                    p = math.log(vals[i] / vals[i + 1]) / math.log(2.0) if vals[i + 1] > 0 else math.inf
                    r.check(f"{key}_order[s={s}][{i}]", p >= op["min_order"], p, op["min_order"])
            elif vals:
                r.check(f"{key}[s={s}]", vals[0] <= op["tolerance"], vals[0], op["tolerance"])
    r.summary["results"] = results


def run_inverse_source(r: Run) -> None:
    cfg = r.cfg
    grid, part = _grid(cfg)
    c = CoefficientSet.from_expressions(grid, part, cfg["coefficients"])
    src = cfg["source"]
    spec = inv.SourceSpec.from_expressions(grid, src["value_factor"], src["density_factor"], src["snapshot_time"],
                                           src["window"], float(src["floor"]))
    spec.check_floor(grid)
    opts = _opts(cfg)
    fmap = inv.assemble_forward_map(spec, c, opts, workers=cfg.workers)
    r.note(f"forward map assembled: {fmap.matrix.shape}")
    value_truth = parse(src["value_truth"]).sample(grid)[0]
    density_truth = parse(src["density_truth"]).sample(grid)[0]
    U, V, data = inv.simulate(value_truth, density_truth, spec, c, opts)
    bundle = fmap.observer.observe(U, V, data)
    regularization = float(src["regularization"])
    r1, r2, diag = inv.reconstruct_tikhonov(bundle, fmap, regularization)
    denom = inv.l2_norm(value_truth, grid) + inv.l2_norm(density_truth, grid)
    err = (inv.l2_norm(r1 - value_truth, grid) + inv.l2_norm(r2 - density_truth, grid)) / denom
    r.check("reconstruction_error", err <= src["max_error"], err, src["max_error"])
    d1, d2 = inv.direct_source_formula(U, V, c, spec)
    derr = (inv.l2_norm(d1 - value_truth, grid) + inv.l2_norm(d2 - density_truth, grid)) / denom
    if src["direct_max_error"] is not None:
        r.check("direct_formula_error", derr <= src["direct_max_error"], derr, src["direct_max_error"])
    prob = inv.TikhonovProblem(fmap, fmap.observer.weighted_vector(bundle))
    gerr = prob.gradient_check(regularization, seed=cfg.seed)
    r.check("gradient_check", gerr <= src["gradient_tol"], gerr, src["gradient_tol"])
    noise = inv.lipschitz_experiment(fmap, truth=(value_truth, density_truth), noise_levels=src["noise_levels"],
                                     regularization=regularization, seed=cfg.seed)
    lo, hi = src["slope_range"]
    r.check("noise_slope", noise.slope is not None and lo <= noise.slope <= hi, noise.slope, [lo, hi])
    r.check("noise_monotone", noise.extra["monotone"], [x["error"] for x in noise.records], None)
    pairs = inv.random_source_pairs(grid, int(src["ensemble"]), cfg.seed)
    ens = inv.lipschitz_experiment(fmap, pairs=pairs, regularization=regularization, seed=cfg.seed)
    r.summary.update(relative_error=err, direct_formula_error=derr, gradient_error=gerr,
                     diagnostics=diag, snapshot_time=spec.snapped_time(grid),
                     noise=noise.to_dict(), ensemble=ens.to_dict(), map_shape=list(fmap.matrix.shape))
    columns = "value_source_true,density_source_true,value_source,density_source"
    lines = ["# " + r.csv_header(), ("x,y," if grid.dim == 2 else "x,") + columns]
    pts = grid.points
    for k in range(grid.n_nodes):
        vals = [*pts[k], value_truth.flat[k], density_truth.flat[k], r1.flat[k], r2.flat[k]]
        lines.append(",".join(repr(float(x)) for x in vals))
    r.files["reconstruction.csv"] = "\n".join(lines) + "\n"
    r.files["lipschitz.json"] = _dumps({"config_hash": cfg.hash, "noise": noise.to_dict(), "ensemble": ens.to_dict()})
    r.bundle = bundle


def run_state_determination(r: Run) -> None:
    cfg = r.cfg
    grid, part = _grid(cfg)
    st = cfg["state"]
    first, second = _data(st["first"], grid, part), _data(st["second"], grid, part)
    margin = float(st["margin"]) if st["margin"] is not None else grid.T / 8
    compare = float(st["compare_margin"]) if st["compare_margin"] is not None else 2 * margin
    opts = _opts(cfg)
    if st["mode"] == "linear":
        c = CoefficientSet.from_expressions(grid, part, cfg["coefficients"])
        rep = inv.state_determination_experiment(first, second, margin, "linear", coeffs=c, opts=opts,
                                                 compare_margin=compare)
        scaled = first - (first - second).scaled(float(st["scale"]))
        rep2 = inv.state_determination_experiment(first, scaled, margin, "linear", coeffs=c, opts=opts)
        dev = abs(rep2.ratio / rep.ratio - 1) if rep.ratio else 0.0
        r.check("scaling_invariance", dev <= 1e-10, dev, 1e-10)
    else:
        nl = cfg["nonlinear"]
        nc = NonlinearCoefficients.from_expressions(grid, part, nl["diffusivity"], nl["gradient_coupling"],
                                                    nl["coupling"])
        rep = inv.state_determination_experiment(first, second, margin, "nonlinear", nonlinear=nc, opts=opts,
                                                 value_cap=st["value_cap"], compare_margin=compare)
        ref_nc = NonlinearCoefficients.from_expressions(grid, part, nl["diffusivity"], "0", nl["coupling"])
        lin = NonlinearSolver(ref_nc, opts).coefficients(np.zeros(grid.field_shape))
        ref = inv.state_determination_experiment(first, second, margin, "linear", coeffs=lin, opts=opts,
                                                 with_boundary_data=False)
        dev = abs(rep.ratio / ref.ratio - 1) if ref.ratio else 0.0
        rep.extra["linear_reference_ratio"] = ref.ratio
        rep.extra["relative_to_linear"] = dev
        if st["linear_tolerance"] is not None:
            r.check("linear_agreement", dev <= st["linear_tolerance"], dev, st["linear_tolerance"])
    if compare != margin and compare < grid.T / 2:
        inner = rep.extra["lhs_at_compare_margin"]
        small, large = (inner, rep.lhs) if compare > margin else (rep.lhs, inner)
        r.check("margin_monotonicity", small <= large, [small, large], None)
    r.summary["report"] = rep.to_dict()


RUNNERS: dict[str, Callable[[Run], None]] = {
    "solve": run_solve,
    "manufacture": run_manufacture,
    "estimate-sweep": run_estimate_sweep,
    "weight-check": run_weight_check,
    "operator-identity": run_operator_identity,
    "inverse-source": run_inverse_source,
    "state-determination": run_state_determination,
}


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items() if not str(k).startswith("_")}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    return x


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def run(cfg: ExperimentConfig, out: Path | None = None) -> int:
    """Run one experiment, write its outputs and return the exit status."""
    out = Path(out or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    r = Run(cfg)
    r.note(f"start {cfg.kind} config_hash={cfg.hash} seed={cfg.seed} workers={cfg.workers}")
    np.random.seed(cfg.seed)
    status = EXIT_PASS
    failure = None
    try:
        RUNNERS[cfg.kind](r)
    except SolverError as exc:
        status, failure = EXIT_SOLVER, {"type": "solver", "message": str(exc), "level": getattr(exc, "level", None)}
    except (ConfigError, CoefficientError, ExpressionError, inv.PositivityError) as exc:
        status, failure = EXIT_CONFIG, {"type": "config", "message": str(exc)}
    failed = [c for c in r.checks if not c["passed"]]
    if status == EXIT_PASS and failed:
        status = EXIT_VIOLATION
        failure = {"type": "invariant", "checks": [c["name"] for c in failed]}
    summary = {"config_hash": cfg.hash, "seed": cfg.seed, "kind": cfg.kind, "config": cfg.echo(),
               "status": {0: "pass", 2: "invariant violation", 3: "config error", 4: "solver failure"}[status],
               "exit_code": status, "checks": r.checks, "failure": failure, **r.summary}
    (out / "summary.json").write_text(_dumps(summary), encoding="utf-8")
    for name, text in sorted(r.files.items()):
        (out / name).write_text(text, encoding="utf-8")
    if r.bundle is not None:
        r.bundle.save(out / "observations", cfg.hash)
    r.note(f"finished with exit code {status}")
    (out / "run.log").write_text("\n".join(r.log) + "\n", encoding="utf-8")
    return status


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mfglab", description="Forward/backward parabolic system experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a TOML config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_show = sub.add_parser("show-config", help="print the materialized configuration")
    p_show.add_argument("config")
    args = ap.parse_args(argv)
    try:
        if args.command == "show-config":
            cfg = parse_config(args.config)
            print(_dumps({"config_hash": cfg.hash, **cfg.echo()}), end="")
            return EXIT_PASS
        cfg = parse_config(args.config, seed=args.seed, workers=args.workers, out=args.out)
    except ConfigError as exc:
        print(json.dumps({"type": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    status = run(cfg)
    print(f"{cfg.kind}: {'pass' if status == 0 else 'fail'} (exit {status}) -> {cfg['output']['dir']}")
    return status


if __name__ == "__main__":
    sys.exit(main())
