"""Numbered acceptance criteria; the terminal summary prints one line per criterion."""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from mfglab.cli import EXIT_PASS, run
from mfglab.config import from_mapping, parse_config
from mfglab.expressions import parse
from mfglab.inverse import SourceSpec, direct_source_formula, l2_norm
from mfglab.operators import CoefficientSet

from conftest import CONFIGS, line_grid

ESTIMATES = ["estimate-scalar", "estimate-scaled-m-minus1", "estimate-scaled-m0", "estimate-scaled-m1",
             "estimate-system", "estimate-time-derivative", "estimate-trace", "estimate-trace-gradient",
             "estimate-first-power"]


def _run(name, out, **overrides):
    cfg = parse_config(CONFIGS / f"{name}.toml", **overrides)
    start = time.perf_counter()
    status = run(cfg, out)
    elapsed = time.perf_counter() - start
    summary = json.loads((out / "summary.json").read_text())
    return status, summary, elapsed


def _checks(summary):
    return {c["name"]: c for c in summary["checks"]}


def _assert_all_passed(summary):
    failed = [c["name"] for c in summary["checks"] if not c["passed"]]
    assert not failed, f"failed checks: {failed}"


@pytest.mark.acceptance(1, "weight bounds and time-factor properties")
def test_weight_suite(tmp_path):
    status, s, elapsed = _run("weight-check", tmp_path)
    assert status == EXIT_PASS
    _assert_all_passed(s)
    names = set(_checks(s))
    assert {"time_factor_symmetry", "time_factor_square_branch"} <= names
    assert {f"bounded[power={p}]" for p in (-2, -1, 0, 1, 2, 3)} <= names
    assert elapsed < 5


@pytest.mark.acceptance(2, "conjugated operator identities converge at order >= 1.8")
def test_operator_identities(tmp_path):
    status, s, elapsed = _run("operator-identity", tmp_path)
    assert status == EXIT_PASS
    orders = [c for c in s["checks"] if "order" in c["name"]]
    assert len(orders) >= 4 and all(c["value"] >= 1.8 for c in orders)
    assert elapsed < 30


@pytest.mark.acceptance(3, "solver second order and Picard contraction < 0.5")
def test_solver_convergence(tmp_path):
    total = 0.0
    for name in ("manufacture-decoupled", "manufacture-coupled"):
        status, s, elapsed = _run(name, tmp_path / name)
        total += elapsed
        assert status == EXIT_PASS
        assert len(s["orders"]) >= 2 and min(s["orders"]) >= 1.8
    contraction = _checks(s)["picard_contraction"]
    assert contraction["passed"] and contraction["value"] < 0.5
    assert total < 60


def _refined_constant(name, out):
    raw = json.loads(json.dumps(parse_config(CONFIGS / f"{name}.toml").echo()))
    raw["grid"]["counts"] = [2 * n for n in raw["grid"]["counts"]]
    raw["grid"]["nt"] *= 2
    status = run(from_mapping(raw), out)
    assert status == EXIT_PASS
    return json.loads((out / "summary.json").read_text())["report"]["constant"]


@pytest.mark.acceptance(4, "estimate sweeps: ratios non-increasing, constant drift < 10% under refinement")
def test_estimate_sweeps(tmp_path):
    start = time.perf_counter()
    drifts = {}
    for name in ESTIMATES:
        status, s, _ = _run(name, tmp_path / name)
        assert status == EXIT_PASS, name
        checks = _checks(s)
        assert checks["tail_non_increasing"]["passed"] and checks["no_growth_at_top"]["passed"], name
        coarse = s["report"]["constant"]
        assert coarse is not None and np.isfinite(coarse), name
        fine = _refined_constant(name, tmp_path / f"{name}-refined")
        drifts[name] = abs(fine / coarse - 1)
    assert all(d < 0.1 for d in drifts.values()), drifts
    assert time.perf_counter() - start < 300


@pytest.mark.acceptance(5, "direct source formula on a stationary state, error <= 0.5%")
def test_direct_formula():
    start = time.perf_counter()
    g, p = line_grid(64, 128)
    c = CoefficientSet.laplacian(g, p)
    u = parse("x**2*(1 - x)**2").sample(g)
    value_src, _ = direct_source_formula(u, np.zeros_like(u), c, SourceSpec.from_expressions(g))
    exact = parse("2 - 12*x + 12*x**2").sample(g)[0]
    assert l2_norm(value_src - exact, g) / l2_norm(exact, g) <= 5e-3
    assert time.perf_counter() - start < 5


@pytest.mark.acceptance(6, "inverse source: error <= 2%, noise slope in [0.9, 1.1], gradient check <= 1e-6")
def test_inverse_source(tmp_path):
    status, s, elapsed = _run("inverse-source", tmp_path, workers=4)
    assert status == EXIT_PASS
    checks = _checks(s)
    assert checks["reconstruction_error"]["value"] <= 0.02
    assert 0.9 <= checks["noise_slope"]["value"] <= 1.1
    assert checks["gradient_check"]["value"] <= 1e-6
    _assert_all_passed(s)
    assert elapsed < 180


@pytest.mark.acceptance(7, "state determination: scaling invariance, nonlinear within 10%, margin monotone")
def test_state_determination(tmp_path):
    status, lin, t1 = _run("state-linear", tmp_path / "linear")
    assert status == EXIT_PASS
    checks = _checks(lin)
    assert checks["scaling_invariance"]["value"] <= 1e-12
    assert checks["margin_monotonicity"]["passed"]
    status, nonlin, t2 = _run("state-nonlinear", tmp_path / "nonlinear")
    assert status == EXIT_PASS
    checks = _checks(nonlin)
    assert checks["linear_agreement"]["value"] <= 0.1
    assert checks["margin_monotonicity"]["passed"]
    assert t1 + t2 < 120


@pytest.mark.acceptance(8, "identical configs give byte-identical reports")
def test_determinism(tmp_path):
    for name, workers in (("weight-check", (1, 1)), ("estimate-scalar", (1, 4)), ("manufacture-coupled", (1, 1)),
                          ("state-linear", (1, 1))):
        outs = []
        for k, w in enumerate(workers):
            out = tmp_path / f"{name}-{k}"
            _run(name, out, workers=w)
            outs.append({f.relative_to(out): f.read_bytes() for f in sorted(out.rglob("*"))
                         if f.is_file() and f.name != "run.log"})
        assert outs[0].keys() == outs[1].keys() and len(outs[0]) >= 1, name
        assert all(outs[0][f] == outs[1][f] for f in outs[0]), name
