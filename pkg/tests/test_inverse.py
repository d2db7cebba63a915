from __future__ import annotations

import numpy as np
import pytest

from mfglab.expressions import parse
from mfglab.inverse import (ObservationBundle, PositivityError, SourceSpec, TikhonovProblem, assemble_forward_map,
                            direct_source_formula, extension_matrix, l2_norm, lipschitz_experiment, loglog_fit,
                            random_source_pairs, reconstruct_tikhonov, simulate, state_determination_experiment)
from mfglab.operators import CoefficientSet
from mfglab.solver import NonlinearCoefficients, NonlinearSolver, SystemData
from mfglab.grid import build_grid

from conftest import line_grid

COUPLED = {"value": {"diffusion": "1 + 0.2*x", "robin": "0.5"}, "coupling": "0.3",
           "cross": {"reaction": "0.2"}, "density": {"diffusion": "1"}}


@pytest.fixture(scope="module")
def fmap():
    g, p = line_grid(33, 65)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    spec = SourceSpec.from_expressions(g, "1 + 0.5*t", "2 - x*t", 0.5, (0.25, 0.75))
    return assemble_forward_map(spec, c), spec, c


def _truth(g):
    return parse("sin(pi*x) + x").sample(g)[0], parse("cos(2*x)").sample(g)[0]


# --- direct formula ------------------------------------------------------------------


def test_direct_formula_zero_state():
    g, p = line_grid(33, 65)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    z = np.zeros(g.field_shape)
    value_src, density_src = direct_source_formula(z, z, c, SourceSpec.from_expressions(g))
    assert np.all(value_src == 0) and np.all(density_src == 0)


def test_direct_formula_stationary_example():
    g, p = line_grid(64, 128)
    c = CoefficientSet.laplacian(g, p)
    u = parse("x**2*(1 - x)**2").sample(g)
    value_src, density_src = direct_source_formula(u, np.zeros_like(u), c, SourceSpec.from_expressions(g))
    exact = parse("2 - 12*x + 12*x**2").sample(g)[0]
    assert l2_norm(value_src - exact, g) <= 5e-3 * l2_norm(exact, g)
    assert np.all(density_src == 0)
    # doubling the known factor halves the recovered source
    halved, _ = direct_source_formula(u, np.zeros_like(u), c, SourceSpec.from_expressions(g, "2"))
    assert np.allclose(halved, value_src / 2, rtol=1e-15)


def test_direct_formula_recovers_simulated_sources():
    g, p = line_grid(65, 129)
    c = CoefficientSet.from_expressions(g, p, COUPLED)
    spec = SourceSpec.from_expressions(g, "1 + 0.5*t", "2 - x*t", 0.5, (0.25, 0.75))
    value_src, density_src = _truth(g)
    U, V, _ = simulate(value_src, density_src, spec, c)
    r1, r2 = direct_source_formula(U, V, c, spec)
    # boundary nodes carry the Robin rows, not the equation
    inner = slice(1, -1)
    assert np.max(np.abs(r1 - value_src)[inner]) < 1e-2
    assert np.max(np.abs(r2 - density_src)[inner]) < 1e-2


def test_positivity_floor_names_offending_node():
    g, _ = line_grid(17, 33)
    spec = SourceSpec.from_expressions(g, "x - 0.5")
    with pytest.raises(PositivityError) as info:
        spec.check_floor(g)
    assert info.value.which == "value_factor" and info.value.node == (8,)


def test_source_spec_validation():
    g, _ = line_grid(17, 33)
    with pytest.raises(ValueError):
        SourceSpec.from_expressions(g, snapshot_time=0.9, window=(0.25, 0.75))
    with pytest.raises(ValueError):
        SourceSpec.from_expressions(g, snapshot_time=0.01, window=(0.0, 0.5)).snapshot_level(g)
    spec = SourceSpec.from_expressions(g, snapshot_time=0.51)
    assert spec.snapped_time(g) == 0.5


# --- forward map and reconstruction -------------------------------------------------


def test_forward_map_columns_and_superposition(fmap):
    fm, spec, c = fmap
    g = c.grid
    assert fm.matrix.shape[1] == 2 * g.n_nodes
    value_src, density_src = _truth(g)
    U, V, _ = simulate(value_src, density_src, spec, c)
    direct = fm.observer.weighted_vector(fm.observer.observe(U, V))
    assert np.allclose(fm.apply(value_src, density_src), direct, rtol=1e-9, atol=1e-9 * np.max(np.abs(direct)))
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 2, g.n_nodes))
    assert np.allclose(fm.apply(*(a + 2 * b)), fm.apply(*a) + 2 * fm.apply(*b), atol=1e-10)


def test_extension_reproduces_quadratics():
    g = build_grid([1.0, 1.0], [6, 7], 1.0, 3)
    E = extension_matrix(g)
    x, y = np.meshgrid(*g.axes, indexing="ij")
    q = 1 + x - 2 * y + x * x + 0.5 * x * y - y * y
    assert np.allclose(E @ q[1:-1, 1:-1].ravel(), q.ravel(), atol=1e-12)


def test_zero_observations_reconstruct_zero(fmap):
    fm, _, _ = fmap
    r1, r2, diag = reconstruct_tikhonov(np.zeros(fm.matrix.shape[0]), fm, 1e-6)
    assert np.all(r1 == 0) and np.all(r2 == 0) and diag["residual"] == 0


def test_objective_gradient_matches_differences(fmap):
    fm, _, c = fmap
    prob = TikhonovProblem(fm, fm.apply(*_truth(c.grid)))
    assert prob.gradient_check(1e-10) <= 1e-6
    with pytest.raises(ValueError):
        prob.solve(-1.0)


@pytest.mark.parametrize("regularization", [1e-10, None])
def test_tikhonov_recovers_sources(fmap, regularization):
    fm, spec, c = fmap
    g = c.grid
    value_src, density_src = _truth(g)
    U, V, _ = simulate(value_src, density_src, spec, c)
    r1, r2, diag = reconstruct_tikhonov(fm.observer.observe(U, V), fm, regularization)
    assert l2_norm(r1 - value_src, g) <= 0.02 * l2_norm(value_src, g)
    assert l2_norm(r2 - density_src, g) <= 0.02 * l2_norm(density_src, g)
    if regularization is None:
        assert diag["regularization"] > 0 and len(diag["l_curve"]) == 12


def test_noise_sweep_is_linear(fmap):
    fm, _, c = fmap
    rep = lipschitz_experiment(fm, truth=_truth(c.grid), noise_levels=[1e-4, 1e-3, 1e-2, 3e-2, 1e-1], seed=3)
    assert 0.9 <= rep.slope <= 1.1
    assert rep.extra["monotone"]


def test_ensemble_ratio_constant_along_fixed_direction(fmap):
    fm, _, c = fmap
    pairs = random_source_pairs(c.grid, 6, seed=1)
    same = pairs[0][0]
    rep = lipschitz_experiment(fm, pairs=pairs + [(same, same)])
    assert "ratio" not in rep.records[-1]
    assert rep.slope == pytest.approx(1.0, abs=1e-9)
    ratios = [r["ratio"] for r in rep.records[:-1]]
    assert np.allclose(ratios, ratios[0], rtol=1e-8)
    with pytest.raises(ValueError):
        lipschitz_experiment(fm, pairs=pairs[:4])
    with pytest.raises(ValueError):
        lipschitz_experiment(fm, truth=_truth(c.grid), noise_levels=[1e-3, 1e-2])


def test_noise_is_reproducible_and_relative():
    b = ObservationBundle({"a": np.array([[1.0, -4.0]]), "b": np.zeros((2, 2))})
    n1, n2 = b.with_noise(0.1, 7), b.with_noise(0.1, 7)
    assert np.array_equal(n1.channels["a"], n2.channels["a"])
    assert np.all(np.abs(n1.channels["a"] - b.channels["a"]) <= 0.4)
    assert np.all(n1.channels["b"] == 0)


def test_loglog_fit_exact_power_law():
    x = np.geomspace(1e-3, 1, 7)
    slope, resid = loglog_fit(x, 3 * x**1.5)
    assert slope == pytest.approx(1.5) and resid == pytest.approx(0.0, abs=1e-12)
    assert loglog_fit([1.0], [1.0]) == (None, None)


# --- state determination -----------------------------------------------------------


@pytest.fixture(scope="module")
def state_setup():
    g, p = line_grid(33, 65)
    nc = NonlinearCoefficients.from_expressions(g, p, "1 + 0.1*x", "0", "0.3")
    lin = NonlinearSolver(nc).coefficients(np.zeros(g.field_shape))
    z = SystemData.zeros(g, p)
    d1 = z.replace(value_source=parse("sin(pi*x)*(1 + t)").sample(g), density_source=parse("cos(x)*t").sample(g),
                   value_terminal=parse("1 + x*x").sample(g)[0],
                   density_initial=parse("1 + 0.5*cos(pi*x)").sample(g)[0])
    d2 = d1.replace(value_source=d1.value_source + 0.3 * parse("x*t").sample(g),
                    density_source=d1.density_source + 0.2 * parse("exp(-t)*x").sample(g))
    return g, p, lin, d1, d2


def test_state_identical_data(state_setup):
    g, p, lin, d1, _ = state_setup
    rep = state_determination_experiment(d1, d1, 1 / 8, "linear", coeffs=lin)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.ratio is None


def test_state_ratio_scaling_invariant(state_setup):
    g, p, lin, d1, d2 = state_setup
    base = state_determination_experiment(d1, d2, 1 / 8, "linear", coeffs=lin)
    for k in (1e-3, 7.3):
        other = state_determination_experiment(d1, d1 - (d1 - d2).scaled(k), 1 / 8, "linear", coeffs=lin)
        assert other.ratio == pytest.approx(base.ratio, rel=1e-10)


def test_state_margin_monotone(state_setup):
    g, p, lin, d1, d2 = state_setup
    reps = [state_determination_experiment(d1, d2, m, "linear", coeffs=lin) for m in (1 / 16, 1 / 8, 1 / 4)]
    assert reps[0].lhs >= reps[1].lhs >= reps[2].lhs
    assert reps[0].rhs == reps[2].rhs
    cmp = state_determination_experiment(d1, d2, 1 / 8, "linear", coeffs=lin, compare_margin=1 / 4)
    assert cmp.extra["lhs_at_compare_margin"] == pytest.approx(reps[2].lhs, rel=1e-14)


def test_state_nonlinear_close_to_linearization(state_setup):
    g, p, lin, d1, d2 = state_setup
    nck = NonlinearCoefficients.from_expressions(g, p, "1 + 0.1*x", "0.01", "0.3")
    lr = state_determination_experiment(d1, d2, 1 / 8, "linear", coeffs=lin)
    nr = state_determination_experiment(d1, d2, 1 / 8, "nonlinear", nonlinear=nck, value_cap=50)
    assert abs(nr.ratio / lr.ratio - 1) <= 0.1
    assert not nr.extra["out_of_hypothesis"]
    assert set(nr.extra["difference_bounds"]) >= {"transport", "reaction", "total"}


def test_state_mode_arguments_checked(state_setup):
    g, p, lin, d1, d2 = state_setup
    with pytest.raises(ValueError):
        state_determination_experiment(d1, d2, 1 / 8, "linear")
    with pytest.raises(ValueError):
        state_determination_experiment(d1, d2, 1 / 8, "nonlinear")
    with pytest.raises(ValueError):
        state_determination_experiment(d1, d2, 1 / 8, "other", coeffs=lin)
