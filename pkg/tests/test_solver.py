from __future__ import annotations

import json

import numpy as np
import pytest

from mfglab.expressions import parse
from mfglab.grid import build_grid, partition_boundary
from mfglab.operators import CoefficientSet
from mfglab.solver import (LinearizedSolver, MaxIterationsExceeded, NonlinearCoefficients, NonlinearSolver,
                           SolveOptions, SystemData, manufacture, manufacture_nonlinear, solve_linearized,
                           solve_nonlinear, step_backward_u, step_forward_v)

from conftest import l2, line_grid

COUPLED = {"value": {"diffusion": "1 + 0.5*x*t", "drift": "x", "reaction": "-1", "robin": "1"},
           "density": {"diffusion": "2 - x", "robin": "t"}, "coupling": "0.2",
           "cross": {"reaction": "0.3", "diffusion": "0.1"}}


def _random_data(g, p, rng) -> SystemData:
    z = SystemData.zeros(g, p)
    return z.replace(**{k: rng.standard_normal(v.shape) for k, v in z.arrays().items()})


def test_options_validated():
    for bad in (dict(theta=0.4), dict(theta=1.1), dict(tol=0.0), dict(max_iter=0), dict(linear_tol=-1.0)):
        with pytest.raises(ValueError):
            SolveOptions(**bad)


def test_system_data_shapes_checked():
    g, p = line_grid(9, 9)
    z = SystemData.zeros(g, p)
    with pytest.raises(ValueError):
        z.replace(value_terminal=np.zeros(5))
    with pytest.raises(ValueError):
        z.replace(value_source=np.full(g.field_shape, np.inf))


def test_zero_data_gives_zero_in_one_sweep():
    g, p = line_grid(17, 17)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    res = solve_linearized(SystemData.zeros(g, p), c)
    assert res.iterations == 1
    assert np.all(res.value == 0) and np.all(res.density == 0)


def test_single_equation_zero_data():
    g, p = line_grid(17, 17)
    c = CoefficientSet.laplacian(g, p)
    z = SystemData.zeros(g, p)
    assert np.all(step_backward_u(np.zeros(g.field_shape), z, c) == 0)
    assert np.all(step_forward_v(np.zeros(g.field_shape), z, c) == 0)


def test_decoupled_system_converges_in_two_sweeps():
    g, p = line_grid(17, 17)
    c = CoefficientSet.from_expressions(g, p, {"value": {"diffusion": "1 + x"}, "density": {"robin": "1"}})
    data = _random_data(g, p, np.random.default_rng(0))
    res = solve_linearized(data, c)
    assert res.iterations == 2
    # matches sequential single-equation solves
    u = step_backward_u(np.zeros(g.field_shape), data, c)
    v = step_forward_v(u, data, c)
    assert np.array_equal(res.value, u) and np.array_equal(res.density, v)


def test_doubling_data_doubles_solution():
    g, p = line_grid(17, 17)
    c = CoefficientSet.laplacian(g, p)
    data = _random_data(g, p, np.random.default_rng(1)).replace(density_source=np.zeros(g.field_shape))
    u1 = step_backward_u(np.zeros(g.field_shape), data, c)
    u2 = step_backward_u(np.zeros(g.field_shape), data.scaled(2.0), c)
    assert np.allclose(u2, 2 * u1, rtol=1e-13, atol=1e-13)


def test_superposition_of_coupled_solver():
    g, p = line_grid(17, 17)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    rng = np.random.default_rng(2)
    a, b = _random_data(g, p, rng), _random_data(g, p, rng)
    opts = SolveOptions(tol=1e-14, max_iter=100)
    ra, rb = solve_linearized(a, c, opts), solve_linearized(b, c, opts)
    rab = solve_linearized(a + b.scaled(-0.7), c, opts)
    scale = np.max(np.abs(ra.value)) + np.max(np.abs(rb.value))
    assert np.max(np.abs(rab.value - (ra.value - 0.7 * rb.value))) <= 1e-12 * scale
    assert np.max(np.abs(rab.density - (ra.density - 0.7 * rb.density))) <= 1e-12 * scale


def test_batched_columns_match_single_solves():
    g, p = line_grid(17, 17)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    rng = np.random.default_rng(3)
    a, b = _random_data(g, p, rng), _random_data(g, p, rng)
    batch = a.replace(**{k: np.stack([v, getattr(b, k)], axis=-1) for k, v in a.arrays().items()})
    opts = SolveOptions(tol=1e-13, max_iter=100)
    rb = solve_linearized(batch, c, opts)
    ra = solve_linearized(a, c, opts)
    assert np.allclose(rb.value[..., 0], ra.value, rtol=1e-10, atol=1e-12)


def test_manufactured_source_example():
    g, p = line_grid(17, 9)
    data = manufacture("x*(1 - x)", "0", CoefficientSet.laplacian(g, p))
    assert np.allclose(data.value_source, -2.0)
    assert np.all(data.density_source == 0)
    assert np.array_equal(data.value_terminal, parse("x*(1 - x)").sample(g)[-1])


def test_manufactured_zero_pair():
    g, p = line_grid(17, 9)
    data = manufacture("0", "0", CoefficientSet.from_expressions(g, p, COUPLED))
    assert all(np.all(v == 0) for v in data.arrays().values())


def _ladder_errors(spec, u, v, theta=0.5):
    errs = []
    for n in (17, 33, 65):
        g, p = line_grid(n, n)
        c = CoefficientSet.from_expressions(g, p, spec)
        res = solve_linearized(manufacture(u, v, c), c, SolveOptions(theta=theta))
        eu = res.value - parse(u).sample(g)
        ev = res.density - parse(v).sample(g)
        errs.append(np.hypot(l2(eu, g), l2(ev, g)))
    return np.log2(np.array(errs[:-1]) / errs[1:])


def test_round_trip_second_order_decoupled():
    assert np.all(_ladder_errors({}, "exp(-t)*sin(pi*x)", "exp(t)*cos(x)") >= 1.8)


def test_round_trip_second_order_coupled():
    assert np.all(_ladder_errors(COUPLED, "exp(-t)*sin(pi*x)", "exp(t)*cos(x)") >= 1.8)


def test_round_trip_first_order_implicit():
    orders = _ladder_errors({"value": {"diffusion": "1 + 0.5*x*t", "robin": "1"}, "coupling": "0.2",
                             "cross": {"reaction": "0.3"}}, "exp(-t)*sin(pi*x)", "exp(t)*cos(x)", theta=1.0)
    assert np.all(orders >= 0.9)


def test_round_trip_2d():
    errs = []
    for n in (9, 17):
        g = build_grid([1.0, 1.0], [n, n], 1.0, n)
        p = partition_boundary(g, ["bottom"])
        c = CoefficientSet.from_expressions(g, p, {"value": {"diffusion": [["1", "0.2"], ["0.2", "1 + x*y"]]},
                                                   "coupling": "0.2", "cross": {"reaction": "0.3"}})
        u, v = "exp(-t)*sin(pi*x)*cos(y)", "exp(t)*cos(x + y)"
        res = solve_linearized(manufacture(u, v, c), c)
        errs.append(np.hypot(l2(res.value - parse(u).sample(g), g), l2(res.density - parse(v).sample(g), g)))
    assert np.log2(errs[0] / errs[1]) >= 1.8


def test_weak_coupling_contracts_geometrically():
    g, p = line_grid(33, 33)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    res = solve_linearized(manufacture("exp(-t)*sin(pi*x)", "exp(t)*cos(x)", c), c)
    ratios = res.contraction_ratios
    assert len(ratios) >= 2 and np.all(ratios < 0.5)
    lines = [json.loads(x) for x in res.history_jsonl().splitlines()]
    assert [x["iteration"] for x in lines] == list(range(1, res.iterations + 1))


def test_converged_pair_is_a_fixed_point():
    g, p = line_grid(33, 33)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    data = manufacture("exp(-t)*sin(pi*x)", "exp(t)*cos(x)", c)
    opts = SolveOptions(tol=1e-8)
    res = solve_linearized(data, c, opts)
    assert LinearizedSolver(c, opts).fixed_point_residual(res.value, res.density, data) <= 10 * opts.tol


def test_iteration_limit_reports_last_update():
    g, p = line_grid(17, 17)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    data = manufacture("exp(-t)*sin(pi*x)", "exp(t)*cos(x)", c)
    with pytest.raises(MaxIterationsExceeded) as info:
        solve_linearized(data, c, SolveOptions(max_iter=2))
    assert info.value.iterations == 2 and info.value.update_norm > 0


def test_bundle_roundtrip(tmp_path):
    g, p = line_grid(9, 9)
    data = _random_data(g, p, np.random.default_rng(4))
    data.save_bundle(tmp_path / "bundle", config_hash="abc123")
    manifest = json.loads((tmp_path / "bundle" / "manifest.json").read_text())
    assert manifest["config_hash"] == "abc123"
    back = SystemData.load_bundle(tmp_path / "bundle", g, p)
    for k, v in data.arrays().items():
        assert np.array_equal(getattr(back, k), v)


def test_nonlinear_reduces_to_linear():
    g, p = line_grid(17, 17)
    nc = NonlinearCoefficients.from_expressions(g, p, "1", "0", "0")
    data = _random_data(g, p, np.random.default_rng(5))
    rn = solve_nonlinear(data, nc)
    rl = solve_linearized(data, CoefficientSet.laplacian(g, p))
    assert np.allclose(rn.value, rl.value, atol=1e-12) and np.allclose(rn.density, rl.density, atol=1e-12)


def test_nonlinear_zero_data():
    g, p = line_grid(17, 17)
    nc = NonlinearCoefficients.from_expressions(g, p, "1 + 0.1*x", "0.05", "0.3")
    res = solve_nonlinear(SystemData.zeros(g, p), nc)
    assert np.all(res.value == 0) and np.all(res.density == 0)


def test_nonlinear_rejects_nonpositive_diffusivity():
    g, p = line_grid(17, 17)
    with pytest.raises(ValueError):
        NonlinearCoefficients.from_expressions(g, p, "x - 0.5", "0", "0")


@pytest.mark.slow
def test_nonlinear_manufactured_small_coupling():
    # zero-flux pair: an h^3 error term of opposite sign masks the h^2 rate below about 65 nodes
    errs = []
    u, v = "exp(-t)*cos(pi*x)", "1 + 0.5*t*cos(pi*x)"
    for n in (65, 129):
        g, p = line_grid(n, n)
        nc = NonlinearCoefficients.from_expressions(g, p, "1 + 0.1*x", "0.05", "0.3")
        data = manufacture_nonlinear(u, v, nc)
        opts = SolveOptions(tol=1e-10)
        solver = NonlinearSolver(nc, opts)
        res = solver.solve(data)
        assert solver.residual(res.value, res.density, data) <= 10 * opts.tol
        errs.append(np.hypot(l2(res.value - parse(u).sample(g), g), l2(res.density - parse(v).sample(g), g)))
    assert np.log2(errs[0] / errs[1]) >= 1.8
