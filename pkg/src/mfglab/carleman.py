"""Both sides of the weighted estimates, data norms and parameter sweeps.

Every weighted integral is accumulated as a logarithm,

    log sum_q  w_q |f_q|^2 rate_q^power s^spow exp(2 s exponent_q),

so the astronomically small weights near ``t = 0`` and ``t = T`` never
underflow before the sum is formed.  Reports keep the logarithms; ratios are
``exp(log lhs - log rhs)``.

Data terms whose constant depends on ``s`` in an unspecified way (the
observation and boundary-data norms) enter the right-hand sides unweighted,
so the empirical ratio absorbs that dependence.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .grid import ALL, OBSERVED, UNOBSERVED, BoundaryPartition, SpaceTimeGrid, trapezoid_weights
from .operators import CoefficientSet, apply_block, robin_residual

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from .weights import CarlemanWeights

NEG_INF = -np.inf


class ResidualCheckError(ValueError):
    """Input fields do not satisfy the equation they are claimed to solve."""

    def __init__(self, message: str, residual: float) -> None:
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# log-space helpers
# ---------------------------------------------------------------------------


def _log(x: NDArray) -> NDArray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def log_add(*terms: float) -> float:
    vals = [t for t in terms if t != NEG_INF]
    return float(logsumexp(vals)) if vals else NEG_INF


def from_log(x: float) -> float:
    return math.exp(x) if x > -745 else 0.0


class WeightedIntegrator:
    """Weighted quadrature over ``Q`` and ``boundary x (0, T)`` at fixed ``s``."""

    def __init__(self, weights: CarlemanWeights, s: float) -> None:
        self.w = weights
        self.s = float(s)
        g = weights.grid
        self.grid = g
        self.partition = weights.partition
        self.log_wq = _log(np.multiply.outer(g.time_weights, g.space_weights))
        ok = weights.inner_levels
        self.log_rate = np.where(ok[(slice(None),) + (None,) * g.dim], weights.log_rate, 0.0)
        self.two_s_exp = 2 * self.s * weights.exponent  # -inf on endpoint levels
        self.log_s = math.log(self.s)
        tr = self.partition.trace
        self.b_log_rate = tr(self.log_rate)
        self.b_two_s_exp = tr(self.two_s_exp)
        self.log_tw = _log(g.time_weights)

    def interior(self, sq: NDArray, power: float = 0.0, spow: float = 0.0) -> float:
        """``log int_Q sq s^spow rate^power exp(2 s exponent)``."""
        with np.errstate(invalid="ignore"):
            terms = self.log_wq + _log(sq) + power * self.log_rate + self.two_s_exp
        return float(logsumexp(terms)) + spow * self.log_s if np.any(terms > NEG_INF) else NEG_INF

    def boundary(self, sq: NDArray, segment: str = ALL, power: float = 0.0, spow: float = 0.0) -> float:
        """Same over ``segment x (0, T)`` for a trace ``(nt, nb)``."""
        nw = self.partition.node_weights(segment)
        with np.errstate(invalid="ignore"):
            terms = self.log_tw[:, None] + _log(nw)[None] + _log(sq) + power * self.b_log_rate + self.b_two_s_exp
        return float(logsumexp(terms)) + spow * self.log_s if np.any(terms > NEG_INF) else NEG_INF

    def h12(self, trace: NDArray, power: float = 0.0, spow: float = 0.0) -> float:
        """``log`` of ``s^spow || rate^(power/2) trace exp(s exponent) ||^2`` in ``L2(0,T; H^1/2)``."""
        log_fac = 0.5 * power * self.b_log_rate + 0.5 * self.b_two_s_exp  # log of the multiplier
        peak = np.max(log_fac, axis=1)
        finite = np.isfinite(peak)
        if not np.any(finite):
            return NEG_INF
        scaled = np.zeros_like(trace, dtype=float)
        scaled[finite] = trace[finite] * np.exp(log_fac[finite] - peak[finite, None])
        per_level = h12_squared(scaled, self.partition)
        with np.errstate(invalid="ignore"):
            terms = np.where(finite, self.log_tw + _log(per_level) + 2 * np.where(finite, peak, 0.0), NEG_INF)
        return float(logsumexp(terms)) + spow * self.log_s if np.any(terms > NEG_INF) else NEG_INF


# ---------------------------------------------------------------------------
# unweighted norms
# ---------------------------------------------------------------------------


def _h12_kernel(partition: BoundaryPartition) -> NDArray:
    pts = partition.points
    w = partition.node_weights(ALL)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.outer(w, w) / d2


def h12_squared(trace: NDArray, partition: BoundaryPartition) -> NDArray:
    """Squared boundary ``H^1/2`` norm per row of ``trace`` (``(..., nb)``).

    On an interval the boundary is two points and the norm is Euclidean.  On
    a rectangle it is the ``L2`` norm plus the double-sum seminorm
    ``sum_{i != j} w_i w_j (g_i - g_j)^2 / |x_i - x_j|^2``.
    """
    tr = np.asarray(trace, dtype=float)
    if partition.grid.dim == 1:
        return np.sum(tr**2, axis=-1)
    w = partition.node_weights(ALL)
    K = _h12_kernel(partition)
    rows = K.sum(axis=1)
    semi = 2 * (np.einsum("...i,i,...i->...", tr, rows, tr) - np.einsum("...i,ij,...j->...", tr, K, tr))
    return np.einsum("...i,i->...", tr**2, w) + np.maximum(semi, 0.0)


def norm_H12_boundary(trace: NDArray, partition: BoundaryPartition) -> float:
    """``H^1/2`` norm of a boundary trace at one time."""
    return float(np.sqrt(h12_squared(np.asarray(trace, float), partition)))


def norm_star(trace: NDArray, partition: BoundaryPartition, dt_trace: NDArray | None = None,
              levels: NDArray | None = None) -> float:
    """``||g||_{H^1(J; L2(unobserved))} + ||g||_{L2(J; H^1/2(boundary))}``.

    ``J`` is the whole time interval, or the window spanned by ``levels``
    (time derivatives are still taken on the full grid).
    """
    g = partition.grid
    tr = np.asarray(trace, float)
    dtr = g.dt(tr) if dt_trace is None else np.asarray(dt_trace, float)
    tw = g.time_weights if levels is None else _sub_weights(g, np.asarray(levels))
    w = partition.node_weights(UNOBSERVED)
    density_extra = float(np.sqrt(tw @ ((tr**2 + dtr**2) @ w))) if np.any(w > 0) else 0.0
    l2h = float(np.sqrt(tw @ h12_squared(tr, partition)))
    return density_extra + l2h


def norm_H1_observed(u: NDArray, partition: BoundaryPartition, levels: NDArray | None = None) -> float:
    """``H^1`` norm of the trace of a field on ``Gamma x (0, T)`` (or a level subset)."""
    g = partition.grid
    tr = partition.trace(u)
    dtr = partition.trace(g.dt(u))
    sq = tr**2 + dtr**2
    if g.dim == 2:
        sq = sq + partition.tangential_derivative(g.grad(u)) ** 2
    tw = g.time_weights if levels is None else _sub_weights(g, levels)
    return float(np.sqrt(tw @ (sq @ partition.node_weights(OBSERVED))))


def _sub_weights(g: SpaceTimeGrid, levels: NDArray) -> NDArray:
    tw = np.zeros(g.nt)
    tw[levels] = trapezoid_weights(len(levels), g.tau)
    return tw


def _space_derivatives(f: NDArray, g: SpaceTimeGrid) -> tuple[NDArray, NDArray]:
    """Gradient and multi-index second derivatives (mixed counted once)."""
    grad = g.grad(f)
    second = [g.dxx(f, i, j) for i in range(g.dim) for j in range(i, g.dim)]
    return grad, np.stack(second)


def norm_H21(f: NDArray, grid: SpaceTimeGrid, margin: float = 0.0) -> float:
    """``H^{2,1}`` norm over ``Omega x (margin, T - margin)``.

    Derivatives are taken on the full grid and then restricted, so the
    restricted norm never exceeds the full one.
    """
    f = np.asarray(f, dtype=float)
    levels = grid.time_slice(margin, grid.T - margin) if margin > 0 else np.arange(grid.nt)
    if len(levels) < 3:
        raise ValueError(f"region (margin={margin}) contains fewer than 3 time levels")
    grad, second = _space_derivatives(f, grid)
    sq = f**2 + np.sum(grad**2, axis=0) + np.sum(second**2, axis=0) + grid.dt(f) ** 2
    tw = _sub_weights(grid, levels)
    return float(np.sqrt(np.sum(np.multiply.outer(tw, grid.space_weights) * sq)))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class Sides:
    """Logarithms of both sides and of every term, for one ``s``."""

    s: float
    lhs_terms: dict[str, float]
    rhs_terms: dict[str, float]
    extra: dict[str, object] = field(default_factory=dict)

    @property
    def log_lhs(self) -> float:
        return log_add(*self.lhs_terms.values())

    @property
    def log_rhs(self) -> float:
        return log_add(*self.rhs_terms.values())

    @property
    def lhs(self) -> float:
        return from_log(self.log_lhs)

    @property
    def rhs(self) -> float:
        return from_log(self.log_rhs)

    @property
    def ratio(self) -> float | None:
        if self.log_rhs == NEG_INF:
            return None
        if self.log_lhs == NEG_INF:
            return 0.0
        return math.exp(self.log_lhs - self.log_rhs)

    def record(self) -> dict:
        def enc(x):
            return None if x == NEG_INF else float(x)

        return {
            "s": self.s,
            "log_lhs": enc(self.log_lhs),
            "log_rhs": enc(self.log_rhs),
            "ratio": self.ratio,
            "lhs_terms": {k: enc(v) for k, v in self.lhs_terms.items()},
            "rhs_terms": {k: enc(v) for k, v in self.rhs_terms.items()},
            **({"extra": self.extra} if self.extra else {}),
        }


def _check(label: str, res: NDArray, scale: NDArray, grid: SpaceTimeGrid, tol: float, boundary=None) -> None:
    if boundary is None:
        wq = np.multiply.outer(grid.time_weights, grid.space_weights)
        num = float(np.sqrt(np.sum(wq * res**2)))
        den = float(np.sqrt(np.sum(wq * scale**2)))
    else:
        w = boundary.node_weights(ALL)
        num = float(np.sqrt(grid.time_weights @ (res**2 @ w)))
        den = float(np.sqrt(grid.time_weights @ (scale**2 @ w)))
    rel = num / den if den > 0 else num
    if rel > tol:
        raise ResidualCheckError(f"{label} is not satisfied", rel)


def _equation_residual(u, source, c: CoefficientSet, which: str) -> tuple[NDArray, NDArray]:
    g = c.grid
    if which == "value":
        op = apply_block(u, c.value, g)
        res = g.dt(u) + op - source
    elif which == "density":
        op = apply_block(u, c.density, g)
        res = g.dt(u) - op - source
    else:
        raise ValueError("which must be 'value' or 'density'")
    return res, np.abs(g.dt(u)) + np.abs(op) + np.abs(source)


def check_scalar_equation(u, source, flux, c: CoefficientSet, which: str = "value", tol: float = 1e-2) -> None:
    """Relative residual of the equation and the Robin condition, interior levels."""
    g = c.grid
    res, scale = _equation_residual(u, source, c, which)
    _check(f"{which} equation", res, scale, g, tol)
    bres = robin_residual(u, c, which, flux)
    _check(f"{which} boundary condition", bres, np.abs(flux) + np.abs(c.partition.trace(u)) + 1e-300, g, tol,
           c.partition)


# ---------------------------------------------------------------------------
# field derivative bundle
# ---------------------------------------------------------------------------


class _Derivs:
    def __init__(self, f: NDArray, g: SpaceTimeGrid, dt: NDArray | None = None) -> None:
        self.f = np.asarray(f, float)
        self.dt = g.dt(self.f) if dt is None else np.asarray(dt, float)
        self.grad = g.grad(self.f)
        self.hess = g.hessian(self.f)
        self.grad2 = np.sum(self.grad**2, axis=0)
        self.hess2 = np.sum(self.hess**2, axis=(0, 1))  # all ordered pairs
        _, second = _space_derivatives(self.f, g)
        self.all2 = self.f**2 + self.grad2 + np.sum(second**2, axis=0)  # all derivatives up to order 2


def _observed_h1_sq(d: _Derivs, partition: BoundaryPartition) -> float:
    g = partition.grid
    sq = partition.trace(d.f) ** 2 + partition.trace(d.dt) ** 2
    if g.dim == 2:
        sq = sq + partition.tangential_derivative(d.grad) ** 2
    return float(g.time_weights @ (sq @ partition.node_weights(OBSERVED)))


def _log_or_ninf(x: float) -> float:
    return math.log(x) if x > 0 else NEG_INF


# ---------------------------------------------------------------------------
# sides evaluators
# ---------------------------------------------------------------------------


def scaled_estimate_sides(u: NDArray, source: NDArray, flux: NDArray, weights: CarlemanWeights, s: float,
                          m: float, c: CoefficientSet, which: str = "value", *, check: bool = True,
                          tol: float = 1e-2, dt_u: NDArray | None = None) -> Sides:
    """Single-equation estimate with every weight multiplied by ``(s rate)^m``.

    Left: ``(s r)^(m-1) (|d_t u|^2 + sum |d_ij u|^2) + (s r)^(m+1) |grad u|^2
    + (s r)^(m+3) u^2``.  Right: ``(s r)^m |F|^2``, the unobserved-boundary
    terms of ``r^(m/2) g``, its weighted ``H^1/2`` norm and the unweighted
    ``H^1`` norm of ``u`` on the observed boundary.
    """
    g = c.grid
    if check:
        check_scalar_equation(u, source, flux, c, which, tol)
    integ = WeightedIntegrator(weights, s)
    d = _Derivs(u, g, dt_u)
    lhs = {
        "dt_and_hessian": integ.interior(d.dt**2 + d.hess2, m - 1, m - 1),
        "gradient": integ.interior(d.grad2, m + 1, m + 1),
        "zeroth": integ.interior(d.f**2, m + 3, m + 3),
    }
    flux = np.asarray(flux, float)
    part = c.partition
    # d_t (r^(m/2) g) = r^(m/2) (d_t g - (m/2) (m'/m) g); rate = e^{kp}/time factor
    ratio_t = weights.time_factor_log_slope[:, None]
    dtg = g.dt(flux) - 0.5 * m * ratio_t * flux
    rhs = {
        "source": integ.interior(np.asarray(source, float) ** 2, m, m),
        "flux_dt": integ.boundary(dtg**2, UNOBSERVED, m - 2, m - 2) if _has(part, UNOBSERVED) else NEG_INF,
        "flux": integ.boundary(flux**2, UNOBSERVED, m - 0.5, m - 0.5) if _has(part, UNOBSERVED) else NEG_INF,
        "flux_h12": integ.h12(flux, m, m),
        "observed_h1": _log_or_ninf(_observed_h1_sq(d, part)),
    }
    return Sides(float(s), lhs, rhs)


def _has(part: BoundaryPartition, segment: str) -> bool:
    return bool(np.any(part.node_weights(segment) > 0))


def scalar_estimate_sides(u: NDArray, source: NDArray, flux: NDArray, weights: CarlemanWeights, s: float,
                          c: CoefficientSet, which: str = "value", *, check: bool = True, tol: float = 1e-2,
                          dt_u: NDArray | None = None) -> Sides:
    """Basic single-equation estimate; every right-hand term is weighted.

    Left: ``(|d_t u|^2 + sum |d_ij u|^2) / (s r) + s r |grad u|^2 + s^3 r^3 u^2``.
    Right: ``|F|^2``, unobserved-boundary ``|d_t g|^2 / (s r)^2`` and
    ``|g|^2 / sqrt(s r)``, the weighted ``H^1/2`` norm of ``g`` and observed
    boundary ``s r |grad u|^2 + s^3 r^3 u^2 + |d_t u|^2 / (s r)``.
    """
    g = c.grid
    if check:
        check_scalar_equation(u, source, flux, c, which, tol)
    integ = WeightedIntegrator(weights, s)
    d = _Derivs(u, g, dt_u)
    part = c.partition
    lhs = {
        "dt_and_hessian": integ.interior(d.dt**2 + d.hess2, -1, -1),
        "gradient": integ.interior(d.grad2, 1, 1),
        "zeroth": integ.interior(d.f**2, 3, 3),
    }
    flux = np.asarray(flux, float)
    tr = part.trace
    unobs = _has(part, UNOBSERVED)
    rhs = {
        "source": integ.interior(np.asarray(source, float) ** 2),
        "flux_dt": integ.boundary(g.dt(flux) ** 2, UNOBSERVED, -2, -2) if unobs else NEG_INF,
        "flux": integ.boundary(flux**2, UNOBSERVED, -0.5, -0.5) if unobs else NEG_INF,
        "flux_h12": integ.h12(flux),
        "observed_gradient": integ.boundary(tr(d.grad2), OBSERVED, 1, 1),
        "observed_zeroth": integ.boundary(tr(d.f**2), OBSERVED, 3, 3),
        "observed_dt": integ.boundary(tr(d.dt**2), OBSERVED, -1, -1),
    }
    return Sides(float(s), lhs, rhs)


def first_power_estimate_sides(u, source, flux, weights, s, c, which="value", **kw) -> Sides:
    """The scaled estimate at ``m = 1`` (left side without any rate factor on
    the principal terms, right side ``s r |F|^2``)."""
    return scaled_estimate_sides(u, source, flux, weights, s, 1.0, c, which, **kw)


@dataclass
class SystemFields:
    """A pair of fields with the sources and Robin data of the linear system."""

    value: NDArray
    density: NDArray
    value_source: NDArray
    density_source: NDArray
    value_flux: NDArray
    density_flux: NDArray
    # optional exact time derivatives (used instead of finite differences)
    dt_value: NDArray | None = None
    dt_density: NDArray | None = None
    dt2_value: NDArray | None = None
    dt2_density: NDArray | None = None
    dt_value_source: NDArray | None = None
    dt_density_source: NDArray | None = None
    dt_value_flux: NDArray | None = None
    dt_density_flux: NDArray | None = None

    def scaled(self, k: float) -> "SystemFields":
        return SystemFields(**{name: None if val is None else k * np.asarray(val)
                               for name, val in self.__dict__.items()})


def check_system(f: SystemFields, c: CoefficientSet, tol: float = 1e-2) -> None:
    """Residuals of both equations (with coupling) and both Robin conditions."""
    g = c.grid
    u, v = f.value, f.density
    res_u = g.dt(u) + apply_block(u, c.value, g) - c.coupling * v - f.value_source
    _check("value equation", res_u, np.abs(g.dt(u)) + np.abs(c.coupling * v) + np.abs(f.value_source)
           + np.abs(apply_block(u, c.value, g)), g, tol)
    Bv = apply_block(v, c.density, g)
    Ku = apply_block(u, c.cross, g)
    res_v = g.dt(v) - Bv - Ku - f.density_source
    _check("density equation", res_v, np.abs(g.dt(v)) + np.abs(Bv) + np.abs(Ku) + np.abs(f.density_source), g, tol)
    part = c.partition
    _check("value boundary condition", robin_residual(u, c, "value", f.value_flux),
           np.abs(f.value_flux) + np.abs(part.trace(u)) + 1e-300, g, tol, part)
    _check("density boundary condition", robin_residual(v, c, "density", f.density_flux),
           np.abs(f.density_flux) + np.abs(part.trace(v)) + 1e-300, g, tol, part)


def system_estimate_sides(f: SystemFields, weights: CarlemanWeights, s: float, c: CoefficientSet, *,
                          check: bool = True, tol: float = 1e-2) -> Sides:
    """Coupled estimate: value block at one power of ``s r`` above the density block.

    Right side: weighted ``s r |F|^2 + |G|^2`` plus the unweighted data norms
    of both fluxes and the observed-boundary ``H^1`` norms of both fields.
    """
    g = c.grid
    if check:
        check_system(f, c, tol)
    integ = WeightedIntegrator(weights, s)
    du = _Derivs(f.value, g, f.dt_value)
    dv = _Derivs(f.density, g, f.dt_density)
    part = c.partition
    lhs = {
        "value_dt_and_hessian": integ.interior(du.dt**2 + du.hess2),
        "value_gradient": integ.interior(du.grad2, 2, 2),
        "value_zeroth": integ.interior(du.f**2, 4, 4),
        "density_dt_and_hessian": integ.interior(dv.dt**2 + dv.hess2, -1, -1),
        "density_gradient": integ.interior(dv.grad2, 1, 1),
        "density_zeroth": integ.interior(dv.f**2, 3, 3),
    }
    rhs = {
        "value_source": integ.interior(np.asarray(f.value_source) ** 2, 1, 1),
        "density_source": integ.interior(np.asarray(f.density_source) ** 2),
        "value_flux_star": _log_or_ninf(norm_star(f.value_flux, part, f.dt_value_flux) ** 2),
        "density_flux_star": _log_or_ninf(norm_star(f.density_flux, part, f.dt_density_flux) ** 2),
        "value_observed_h1": _log_or_ninf(_observed_h1_sq(du, part)),
        "density_observed_h1": _log_or_ninf(_observed_h1_sq(dv, part)),
    }
    return Sides(float(s), lhs, rhs)


def boundary_derivative_data(f: SystemFields, c: CoefficientSet, dc: CoefficientSet) -> tuple[NDArray, NDArray]:
    """Extra Robin data of the time-differentiated system.

    ``conormal_{dA}(u) - (d_t p) u`` and the same for the density with ``dB``
    and ``d_t q``; both vanish when the coefficients do not depend on time.
    """
    part = c.partition
    g = c.grid
    out = []
    for field_, blk, robin in ((f.value, dc.value, dc.value_robin), (f.density, dc.density, dc.density_robin)):
        grad = g.grad(field_)
        flux = np.einsum("ij...,j...->i...", blk.diffusion, grad)
        out.append(part.normal_derivative(flux) - robin * part.trace(field_))
    return out[0], out[1]


def check_differentiated_system(f: SystemFields, y: NDArray, z: NDArray, c: CoefficientSet,
                                dc: CoefficientSet, tol: float = 1e-2) -> None:
    g = c.grid
    u, v = f.value, f.density
    dF = g.dt(f.value_source) if f.dt_value_source is None else f.dt_value_source
    dG = g.dt(f.density_source) if f.dt_density_source is None else f.dt_density_source
    src_y = c.coupling * z + dc.coupling * v - apply_block(u, dc.value, g) + dF
    res_y = g.dt(y) + apply_block(y, c.value, g) - src_y
    _check("differentiated value equation", res_y, np.abs(g.dt(y)) + np.abs(src_y), g, tol)
    src_z = apply_block(y, c.cross, g) + apply_block(u, dc.cross, g) + apply_block(v, dc.density, g) + dG
    res_z = g.dt(z) - apply_block(z, c.density, g) - src_z
    _check("differentiated density equation", res_z, np.abs(g.dt(z)) + np.abs(src_z), g, tol)


def time_derivative_sides(f: SystemFields, weights: CarlemanWeights, s: float, c: CoefficientSet, *,
                          dcoeffs: CoefficientSet | None = None, check: bool = True, tol: float = 1e-2) -> Sides:
    """Estimate for the time derivatives ``y = d_t u``, ``z = d_t v``.

    Besides both sides, ``extra`` carries the four unobserved-boundary
    bookkeeping terms built from the extra Robin data of the differentiated
    system and their interior majorants.
    """
    g = c.grid
    part = c.partition
    dc = c.time_derivative() if dcoeffs is None else dcoeffs
    if check:
        check_system(f, c, tol)
    y = g.dt(f.value) if f.dt_value is None else np.asarray(f.dt_value)
    z = g.dt(f.density) if f.dt_density is None else np.asarray(f.dt_density)
    if check:
        check_differentiated_system(f, y, z, c, dc, tol)
    integ = WeightedIntegrator(weights, s)
    du = _Derivs(f.value, g, f.dt_value)
    dv = _Derivs(f.density, g, f.dt_density)
    dy = _Derivs(y, g, f.dt2_value)
    dz = _Derivs(z, g, f.dt2_density)
    lhs = {
        "dt_value_dt_and_hessian": integ.interior(dy.dt**2 + dy.hess2, -1, -1),
        "dt_value_gradient": integ.interior(dy.grad2, 1, 1),
        "dt_value_zeroth": integ.interior(dy.f**2, 3, 3),
        "dt_density_dt_and_hessian": integ.interior(dz.dt**2 + dz.hess2, -2, -2),
        "dt_density_gradient": integ.interior(dz.grad2),
        "dt_density_zeroth": integ.interior(dz.f**2, 2, 2),
    }
    F, G = np.asarray(f.value_source), np.asarray(f.density_source)
    dF = g.dt(F) if f.dt_value_source is None else f.dt_value_source
    dG = g.dt(G) if f.dt_density_source is None else f.dt_density_source
    gflux, hflux = np.asarray(f.value_flux), np.asarray(f.density_flux)
    dg = g.dt(gflux) if f.dt_value_flux is None else f.dt_value_flux
    dh = g.dt(hflux) if f.dt_density_flux is None else f.dt_density_flux
    rhs = {
        "value_source": integ.interior(F**2, 1, 1),
        "dt_value_source": integ.interior(dF**2),
        "density_source": integ.interior(G**2),
        "dt_density_source": integ.interior(dG**2, -1, -1),
        "value_flux_star": _log_or_ninf(norm_star(gflux, part, dg) ** 2),
        "density_flux_star": _log_or_ninf(norm_star(hflux, part, dh) ** 2),
        "dt_value_flux_star": _log_or_ninf(norm_star(dg, part) ** 2),
        "dt_density_flux_star": _log_or_ninf(norm_star(dh, part) ** 2),
        "value_observed_h1": _log_or_ninf(_observed_h1_sq(du, part)),
        "density_observed_h1": _log_or_ninf(_observed_h1_sq(dv, part)),
        "dt_value_observed_h1": _log_or_ninf(_observed_h1_sq(dy, part)),
        "dt_density_observed_h1": _log_or_ninf(_observed_h1_sq(dz, part)),
    }
    extra = _bookkeeping(f, y, z, du, dv, dy, dz, c, dc, weights, integ)
    return Sides(float(s), lhs, rhs, extra)


def _bookkeeping(f, y, z, du, dv, dy, dz, c, dc, weights, integ: WeightedIntegrator) -> dict:
    g = c.grid
    part = c.partition
    value_extra, density_extra = boundary_derivative_data(f, c, dc)
    # d_t of the extra data, via time-differentiated coefficients and fields
    value_extra_dt = g.dt(value_extra)
    density_extra_dt = g.dt(density_extra)
    unobs = _has(part, UNOBSERVED)
    ratio_t = weights.time_factor_log_slope[:, None]
    # d_t (rate^(-1/2) h) = rate^(-1/2) (d_t h + (1/2)(m'/m) h)
    density_extra_scaled_dt = density_extra_dt + 0.5 * ratio_t * density_extra
    bnd, inner = integ.boundary, integ.interior
    terms = {
        "value_extra_unobserved": log_add(bnd(value_extra_dt**2, UNOBSERVED, -2, -2),
                                          bnd(value_extra**2, UNOBSERVED, -0.5, -0.5)) if unobs else NEG_INF,
        "density_extra_unobserved": log_add(bnd(density_extra_scaled_dt**2, UNOBSERVED, -3, -3),
                                            bnd(density_extra**2, UNOBSERVED, -2.5, -2.5)) if unobs else NEG_INF,
        "value_extra_h12": integ.h12(value_extra),
        "density_extra_h12": integ.h12(density_extra, -1, -1),
    }
    majorants = {
        "value_extra_unobserved": log_add(inner(dy.all2, -2, -2), inner(du.all2), inner(dy.grad2 + dy.f**2),
                                          inner(du.grad2 + du.f**2, 2, 2)),
        "density_extra_unobserved": log_add(inner(dz.all2, -3, -3), inner(dv.all2, -1, -1),
                                            inner(dz.grad2 + dz.f**2, -1, -1), inner(dv.grad2 + dv.f**2, 1, 1)),
        "value_extra_h12": log_add(inner(du.hess2), inner(du.grad2 + du.f**2, 2, 2)),
        "density_extra_h12": log_add(inner(dv.grad2 + dv.f**2, 1, 1), inner(dv.all2, -1, -1)),
    }

    def enc(x):
        return None if x == NEG_INF else float(x)

    ratios = {k: (None if majorants[k] == NEG_INF else (0.0 if terms[k] == NEG_INF
                                                        else math.exp(terms[k] - majorants[k])))
              for k in terms}
    return {
        "log_terms": {k: enc(v) for k, v in terms.items()},
        "log_majorants": {k: enc(v) for k, v in majorants.items()},
        "term_over_majorant": ratios,
        "value_extra_flux_max": float(np.max(np.abs(value_extra))),
        "density_extra_flux_max": float(np.max(np.abs(density_extra))),
    }


def trace_estimate_sides(w: NDArray, weights: CarlemanWeights, s: float, r: float = 0.0) -> tuple[Sides, Sides]:
    """Trace inequalities at each time level, summed over levels.

    First: ``int_boundary r^(2r) w^2 e`` against
    ``int_Omega (r^(2r) |grad w|^2 + s^2 r^(2r+2) w^2) e``; second: the same
    with ``w`` replaced by its gradient.
    """
    g = weights.grid
    part = weights.partition
    integ = WeightedIntegrator(weights, s)
    d = _Derivs(w, g)
    tr = part.trace
    first = Sides(float(s), {"boundary": integ.boundary(tr(d.f**2), ALL, 2 * r)},
                  {"gradient": integ.interior(d.grad2, 2 * r), "zeroth": integ.interior(d.f**2, 2 * r + 2, 2)})
    second = Sides(float(s), {"boundary": integ.boundary(tr(d.grad2), ALL, 2 * r)},
                   {"hessian": integ.interior(d.hess2, 2 * r), "gradient": integ.interior(d.grad2, 2 * r + 2, 2)})
    return first, second


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    estimate: str
    sharpness: float
    records: list[Sides]
    s_start: float | None
    constant: float | None
    violation: bool
    growth_at_top: float | None

    @property
    def s_values(self) -> list[float]:
        return [r.s for r in self.records]

    @property
    def ratios(self) -> list[float | None]:
        return [r.ratio for r in self.records]

    def tail_non_increasing(self, fraction: float = 0.5, slack: float = 0.0) -> bool:
        """Ratios over the top ``fraction`` of the sweep never increase (up to ``slack``)."""
        vals = [r for r in self.ratios if r is not None]
        k = max(2, int(math.ceil(len(vals) * fraction)))
        tail = vals[-k:]
        return all(b <= a * (1 + slack) for a, b in zip(tail, tail[1:]))

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "sharpness": self.sharpness,
            "s_range": [min(self.s_values), max(self.s_values)] if self.records else None,
            "s_start": self.s_start,
            "constant": self.constant,
            "violation": self.violation,
            "growth_at_top": self.growth_at_top,
            "records": [r.record() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, header_comment: str | None = None) -> str:
        """One row per ``s`` and term."""
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["estimate", "s", "side", "term", "log_value"])
        for rec in self.records:
            for side, terms in (("lhs", rec.lhs_terms), ("rhs", rec.rhs_terms)):
                for name, val in terms.items():
                    wr.writerow([self.estimate, repr(rec.s), side, name, "" if val == NEG_INF else repr(float(val))])
            wr.writerow([self.estimate, repr(rec.s), "ratio", "", "" if rec.ratio is None else repr(rec.ratio)])
        return buf.getvalue()


def summarize_sweep(estimate: str, sharpness: float, records: Sequence[Sides], growth_tol: float = 0.05
                    ) -> EstimateReport:
    """Empirical start of the admissible range, constant and growth flag.

    The start is the smallest sweep point after which the ratio never
    increases; the constant is the largest ratio from there on.  A violation
    is flagged when the ratio grows by more than ``growth_tol`` per doubling
    of ``s`` between the last two sweep points.
    """
    recs = sorted(records, key=lambda r: r.s)
    pts = [(r.s, r.ratio) for r in recs if r.ratio is not None]
    if not pts:
        return EstimateReport(estimate, sharpness, list(recs), None, None, False, None)
    start = len(pts) - 1
    while start > 0 and pts[start - 1][1] >= pts[start][1]:
        start -= 1
    constant = max(r for _, r in pts[start:])
    growth = None
    violation = False
    if len(pts) >= 2:
        (s1, r1), (s2, r2) = pts[-2], pts[-1]
        if r1 > 0:
            growth = (r2 / r1) ** (1.0 / math.log2(s2 / s1)) - 1.0
            violation = growth > growth_tol
    return EstimateReport(estimate, sharpness, list(recs), pts[start][0], constant, violation, growth)


def sweep_s(estimate: str, evaluate: Callable[[float], Sides], s_grid: Sequence[float], sharpness: float = 1.0,
            workers: int = 1, growth_tol: float = 0.05) -> EstimateReport:
    """Evaluate ``evaluate(s)`` over a geometric grid of at least four points."""
    s_grid = [float(s) for s in s_grid]
    if len(s_grid) < 4:
        raise ValueError("an s-sweep needs at least 4 points")
    if any(s <= 0 for s in s_grid):
        raise ValueError("s values must be positive")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(evaluate, s_grid))
    else:
        records = [evaluate(s) for s in s_grid]
    return summarize_sweep(estimate, sharpness, records, growth_tol)


ESTIMATES: Mapping[str, str] = {
    "scalar": "single equation, all right-hand terms weighted",
    "scaled": "single equation with an extra (s rate)^m factor",
    "first-power": "scaled estimate at m = 1",
    "system": "coupled value/density pair",
    "time-derivative": "coupled pair of time derivatives",
    "trace": "weighted trace inequalities",
}
