from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglab.carleman import (EstimateReport, ResidualCheckError, Sides, SystemFields, first_power_estimate_sides,
                             h12_squared, norm_H12_boundary, norm_H21, norm_star, scalar_estimate_sides,
                             scaled_estimate_sides, summarize_sweep, sweep_s, system_estimate_sides,
                             time_derivative_sides, trace_estimate_sides)
from mfglab.expressions import parse
from mfglab.grid import ALL, build_grid, partition_boundary
from mfglab.operators import CoefficientSet, apply_block
from mfglab.solver import manufacture
from mfglab.weights import CarlemanWeights

from conftest import line_grid

# squared H^1/2 norm of sin(pi x) on the bottom side of the unit square (zero elsewhere):
# L2 part 1/2 plus the Slobodeckij double integral over all side pairs, by adaptive dblquad
H12_SIN_SIDE = 9.980181092498302

S_GRID = [4.0, 8.0, 16.0, 32.0, 64.0]
SPEC = {"value": {"diffusion": "1 + 0.1*x", "robin": "0.5"}, "coupling": "0.3", "cross": {"reaction": "0.2"}}
VALUE, DENSITY = "(1 + t)*cos(x) + x*x", "exp(-t/4)*(1 + x)"


def _setup(spec=SPEC, nx=64, nt=128, T=4.0, observed=("right",)):
    g, p = line_grid(nx, nt, T, observed)
    c = CoefficientSet.from_expressions(g, p, spec)
    U, V = parse(VALUE), parse(DENSITY)
    data = manufacture(U, V, c)
    fields = SystemFields(U.sample(g), V.sample(g), data.value_source, data.density_source, data.value_flux,
                          data.density_flux, dt_value=U.diff("t").sample(g), dt_density=V.diff("t").sample(g),
                          dt2_value=U.diff("t", 2).sample(g), dt2_density=V.diff("t", 2).sample(g))
    return c, CarlemanWeights(g, p), fields


def _value_source(c, f):
    return f.value_source + c.coupling * f.density


# --- norms -------------------------------------------------------------------


def test_h21_norm_examples():
    g, _ = line_grid(257, 33)
    assert norm_H21(np.zeros(g.field_shape), g) == 0.0
    x = np.broadcast_to(g.axes[0], g.field_shape)
    assert norm_H21(x, g) == pytest.approx(math.sqrt(4 / 3), rel=1e-5)


def test_h21_norm_restriction_monotone():
    g, _ = line_grid(33, 65)
    f = parse("exp(t)*sin(3*x) + x*t").sample(g)
    full = norm_H21(f, g)
    assert norm_H21(f, g, 1 / 8) <= full
    assert norm_H21(f, g, 1 / 4) <= norm_H21(f, g, 1 / 8)
    with pytest.raises(ValueError):
        norm_H21(f, g, 0.499)


def test_star_norm_zero_and_segment_restriction():
    g, p = line_grid(9, 257)
    assert norm_star(np.zeros((g.nt, p.nb)), p) == 0.0
    tr = np.repeat(g.times[:, None], p.nb, axis=1)
    # H1(0,T;L2) on the left end only: sqrt(int t^2 + 1); L2(0,T;H1/2) on both ends: sqrt(2 int t^2)
    expected = math.sqrt(4 / 3) + math.sqrt(2 / 3)
    assert norm_star(tr, p) == pytest.approx(expected, rel=1e-5)


def _square(n):
    g = build_grid([1.0, 1.0], [n, n], 1.0, 5)
    return g, partition_boundary(g, ["bottom"])


def test_h12_constant_trace_has_zero_seminorm():
    g, p = _square(13)
    ones = np.ones(p.nb)
    assert norm_H12_boundary(ones, p) == pytest.approx(2.0, rel=1e-14)  # |boundary|^(1/2) = 4^(1/2)


def test_h12_one_dimensional_is_euclidean():
    g, p = line_grid(9, 5)
    assert norm_H12_boundary(np.array([3.0, 4.0]), p) == pytest.approx(5.0)


def test_h12_ramp_matches_brute_force_double_sum():
    g, p = _square(9)
    pts = p.points
    ramp = np.where(pts[:, 1] == 0, np.tanh(6 * (pts[:, 0] - 0.5)), 0.0) + 0.3 * pts[:, 0] * pts[:, 1]
    w = p.node_weights(ALL)
    total = 0.0
    for i in range(p.nb):
        total += w[i] * ramp[i] ** 2
        for j in range(p.nb):
            if i != j:
                d2 = (pts[i, 0] - pts[j, 0]) ** 2 + (pts[i, 1] - pts[j, 1]) ** 2
                total += w[i] * w[j] * (ramp[i] - ramp[j]) ** 2 / d2
    assert float(h12_squared(ramp, p)) == pytest.approx(total, rel=1e-12)


def test_h12_sine_side_converges_to_double_integral():
    vals = []
    for n in (48, 96, 192):
        g, p = _square(n)
        pts = p.points
        vals.append(float(h12_squared(np.where(pts[:, 1] == 0, np.sin(np.pi * pts[:, 0]), 0.0), p)))
    errs = np.abs(np.array(vals) - H12_SIN_SIDE)
    assert np.all(np.diff(errs) < 0)
    assert errs[-1] / H12_SIN_SIDE < 5e-3
    extrapolated = 2 * vals[-1] - vals[-2]  # first-order error from the excluded diagonal cell
    assert extrapolated == pytest.approx(H12_SIN_SIDE, rel=1e-4)


def test_star_norm_two_dimensional_uses_h12():
    g, p = _square(96)
    pts = p.points
    tr = np.broadcast_to(np.where(pts[:, 1] == 0, np.sin(np.pi * pts[:, 0]), 0.0), (g.nt, p.nb))
    # sine vanishes off the bottom side apart from round-off, so the H1(L2) part on the other sides is ~0
    star = norm_star(tr, p)
    assert star == pytest.approx(math.sqrt(float(h12_squared(tr[0], p))), rel=1e-12)
    assert star == pytest.approx(math.sqrt(H12_SIN_SIDE), rel=5e-3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.floats(-4, 4))
def test_h12_homogeneous_of_degree_two(seed, k):
    g, p = _square(7)
    tr = np.random.default_rng(seed).standard_normal(p.nb)
    assert float(h12_squared(k * tr, p)) == pytest.approx(k * k * float(h12_squared(tr, p)), rel=1e-10, abs=1e-12)


# --- single-equation evaluators -------------------------------------------------------


def test_scalar_zero_fields():
    c, w, f = _setup(nx=17, nt=33)
    z = np.zeros(c.grid.field_shape)
    zb = np.zeros((c.grid.nt, c.partition.nb))
    sides = scalar_estimate_sides(z, z, zb, w, 8.0, c)
    assert sides.lhs == 0.0 and sides.rhs == 0.0 and sides.ratio is None
    rep = sweep_s("scalar", lambda s: scalar_estimate_sides(z, z, zb, w, s, c), S_GRID)
    assert rep.constant is None and not rep.violation


def test_scalar_requires_equation_residual():
    c, w, f = _setup(nx=33, nt=65)
    with pytest.raises(ResidualCheckError) as info:
        scalar_estimate_sides(f.value, _value_source(c, f) + 5.0, f.value_flux, w, 8.0, c)
    assert info.value.residual > 1e-2


@pytest.mark.parametrize("k", [2.0, 3.0])
def test_scalar_quadratic_homogeneity(k):
    c, w, f = _setup(nx=33, nt=65)
    base = scalar_estimate_sides(f.value, _value_source(c, f), f.value_flux, w, 8.0, c, dt_u=f.dt_value)
    scaled = scalar_estimate_sides(k * f.value, k * _value_source(c, f), k * f.value_flux, w, 8.0, c,
                                   dt_u=k * f.dt_value)
    assert scaled.lhs == pytest.approx(k * k * base.lhs, rel=1e-12)
    assert scaled.rhs == pytest.approx(k * k * base.rhs, rel=1e-12)
    for name, val in base.lhs_terms.items():
        assert np.isfinite(val)


def test_scalar_whole_boundary_observed_dominated_by_observed_terms():
    c, w, f = _setup(nx=33, nt=65, observed=("left", "right"))
    sides = scalar_estimate_sides(f.value, _value_source(c, f), f.value_flux, w, 8.0, c, dt_u=f.dt_value)
    assert sides.rhs_terms["flux"] == -np.inf and sides.rhs_terms["flux_dt"] == -np.inf
    observed = max(sides.rhs_terms[k] for k in ("observed_gradient", "observed_zeroth", "observed_dt"))
    others = max(sides.rhs_terms[k] for k in ("source", "flux_h12"))
    assert observed > others
    assert sides.ratio is not None and np.isfinite(sides.ratio)


def test_scaled_at_zero_power_has_scalar_left_side():
    c, w, f = _setup(nx=33, nt=65)
    args = (f.value, _value_source(c, f), f.value_flux, w, 8.0)
    a = scalar_estimate_sides(*args, c, dt_u=f.dt_value)
    b = scaled_estimate_sides(*args, 0.0, c, dt_u=f.dt_value)
    assert b.log_lhs == pytest.approx(a.log_lhs, rel=1e-14)


def test_first_power_is_scaled_at_one():
    c, w, f = _setup(nx=33, nt=65)
    args = (f.value, _value_source(c, f), f.value_flux, w, 8.0)
    a = first_power_estimate_sides(*args, c, dt_u=f.dt_value)
    b = scaled_estimate_sides(*args, 1.0, c, dt_u=f.dt_value)
    assert a.lhs_terms == b.lhs_terms and a.rhs_terms == b.rhs_terms


@pytest.mark.parametrize("m", [-1.0, 1.0])
def test_scaled_powers_give_finite_ratios(m):
    c, w, f = _setup()
    rep = sweep_s(f"scaled(m={m})", lambda s: scaled_estimate_sides(f.value, _value_source(c, f), f.value_flux, w,
                                                                      s, m, c, dt_u=f.dt_value), S_GRID)
    assert all(r is not None and np.isfinite(r) for r in rep.ratios)
    assert rep.tail_non_increasing()


def test_left_side_decays_with_strength():
    c, w, f = _setup()
    lhs = [scalar_estimate_sides(f.value, _value_source(c, f), f.value_flux, w, s, c, dt_u=f.dt_value).log_lhs
           for s in S_GRID]
    assert np.all(np.diff(lhs) < 0)


# --- system evaluators ---------------------------------------------------------------


def test_system_zero_fields():
    c, w, f = _setup(nx=17, nt=33)
    zero = f.scaled(0.0)
    sides = system_estimate_sides(zero, w, 8.0, c)
    assert sides.lhs == 0.0 and sides.rhs == 0.0
    sides = time_derivative_sides(zero, w, 8.0, c)
    assert sides.lhs == 0.0 and sides.rhs == 0.0


def test_system_homogeneity():
    c, w, f = _setup(nx=33, nt=65)
    a = system_estimate_sides(f, w, 8.0, c)
    b = system_estimate_sides(f.scaled(3.0), w, 8.0, c)
    assert b.lhs == pytest.approx(9 * a.lhs, rel=1e-12)
    assert b.rhs == pytest.approx(9 * a.rhs, rel=1e-12)


def test_system_decoupled_ratio_stable():
    c, w, f = _setup({"value": {"diffusion": "1 + 0.1*x", "robin": "0.5"}})
    rep = sweep_s("system", lambda s: system_estimate_sides(f, w, s, c), S_GRID)
    assert all(r is not None and np.isfinite(r) for r in rep.ratios)
    assert rep.tail_non_increasing() and not rep.violation


def test_time_independent_coefficients_have_no_extra_boundary_data():
    c, w, f = _setup(nx=33, nt=65)
    assert c.is_time_independent
    extra = time_derivative_sides(f, w, 8.0, c).extra
    assert extra["value_extra_flux_max"] == 0.0 and extra["density_extra_flux_max"] == 0.0


def test_time_derivative_bookkeeping_below_majorants():
    spec = {"value": {"diffusion": "1 + 0.1*x*t", "robin": "0.5 + 0.1*t"},
            "density": {"diffusion": "1 + 0.05*t", "robin": "0.2*t"}, "coupling": "0.3", "cross": {"reaction": "0.2"}}
    c, w, f = _setup(spec)
    prev = None
    for s in S_GRID:
        extra = time_derivative_sides(f, w, s, c).extra
        assert extra["value_extra_flux_max"] > 0 and extra["density_extra_flux_max"] > 0
        ratios = extra["term_over_majorant"]
        assert all(v is not None and 0 < v < 1 for v in ratios.values())
        if prev is not None:
            assert all(ratios[k] <= prev[k] for k in ratios)
        prev = ratios


# --- trace inequalities -----------------------------------------------------------------


def test_trace_zero_field():
    c, w, f = _setup(nx=17, nt=33)
    first, second = trace_estimate_sides(np.zeros(c.grid.field_shape), w, 8.0)
    assert first.lhs == 0.0 and first.rhs == 0.0 and second.lhs == 0.0


def test_trace_constant_field_closed_form():
    c, w, f = _setup(nx=33, nt=65)
    g = c.grid
    s = 4.0
    first, _ = trace_estimate_sides(np.ones(g.field_shape), w, s)
    weight = np.exp(2 * s * w.exponent)
    wq = np.multiply.outer(g.time_weights, g.space_weights)
    boundary = np.sum(g.time_weights[:, None] * weight[:, [0, -1]])
    interior = s**2 * np.sum(wq * w.rate**2 * weight)
    assert first.lhs == pytest.approx(boundary, rel=1e-10)
    assert first.rhs == pytest.approx(interior, rel=1e-10)


def test_trace_ratio_stable_in_strength():
    c, w, f = _setup()
    ratios = [trace_estimate_sides(f.value, w, s)[0].ratio for s in (4.0, 8.0, 16.0)]
    assert all(np.isfinite(ratios))
    assert ratios[2] <= ratios[1] <= ratios[0]


# --- sweeps -------------------------------------------------------------------------------


def test_sweep_needs_four_positive_points():
    with pytest.raises(ValueError):
        sweep_s("x", lambda s: None, [1.0, 2.0, 4.0])
    with pytest.raises(ValueError):
        sweep_s("x", lambda s: None, [0.0, 1.0, 2.0, 4.0])


def _fake(s, ratio):
    return Sides(s, {"a": math.log(ratio)}, {"b": 0.0})


def test_summary_flags_growth_and_finds_start():
    rep = summarize_sweep("x", 1.0, [_fake(4, 1.0), _fake(8, 2.0), _fake(16, 1.5), _fake(32, 1.2)])
    assert rep.s_start == 8 and rep.constant == pytest.approx(2.0) and not rep.violation
    rep = summarize_sweep("x", 1.0, [_fake(4, 1.0), _fake(8, 1.1), _fake(16, 1.2), _fake(32, 1.5)])
    assert rep.violation and rep.growth_at_top == pytest.approx(0.25)


def test_report_serialization_sorted_and_parallel_identical():
    c, w, f = _setup(nx=33, nt=65)
    ev = lambda s: scalar_estimate_sides(f.value, _value_source(c, f), f.value_flux, w, s, c,  # noqa: E731
                                         dt_u=f.dt_value)
    serial = sweep_s("scalar", ev, S_GRID[::-1])
    parallel = sweep_s("scalar", ev, S_GRID, workers=4)
    assert isinstance(serial, EstimateReport)
    assert serial.s_values == S_GRID
    assert serial.to_json() == parallel.to_json()
    text = serial.to_csv("config_hash=abc")
    assert text.startswith("# config_hash=abc\nestimate,s,side,term,log_value\n")


def test_system_sources_consistent_with_cross_operator():
    c, w, f = _setup(nx=33, nt=65)
    g = c.grid
    res = g.dt(f.density) - apply_block(f.density, c.density, g) - apply_block(f.value, c.cross, g) \
        - f.density_source
    assert np.max(np.abs(res[1:-1, 1:-1])) < 1e-2
