"""Carleman weight functions and their bounds.

The time factor equals ``t**2`` on ``[0, T/4]``, is mirrored about ``T/2``
and on ``[T/4, T/2]`` is the even polynomial patch

    2.5 L**2 - 2 z**2 + z**4 / (2 L**2),   z = t - T/2,  L = T/4,

which matches value, slope and curvature of ``t**2`` at ``T/4`` and is
smooth and symmetric at ``T/2``.  With ``k`` the sharpness, ``p(x)`` the
spatial profile and ``m(t)`` the time factor,

    rate     = exp(k p) / m
    exponent = (exp(k p) - exp(2 k max p)) / m  < 0

so the weight ``exp(2 s exponent)`` vanishes at ``t = 0`` and ``t = T``.
Products are formed in log space; endpoint levels carry zero weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .expressions import Expression, parse
from .grid import BoundaryPartition, ScalarField, SpaceTimeGrid

if TYPE_CHECKING:
    from numpy.typing import NDArray


# ---------------------------------------------------------------------------
# time factor
# ---------------------------------------------------------------------------


def _time_factor_parts(t: NDArray, T: float) -> tuple[NDArray, NDArray, NDArray]:
    """Time factor and its first two derivatives for ``t`` in ``[0, T]`` (endpoints allowed)."""
    t = np.asarray(t, dtype=float)
    L = T / 4.0
    r = np.where(t <= T / 2, t, T - t)  # mirror
    sgn = np.where(t <= T / 2, 1.0, -1.0)
    z = r - T / 2
    inner = r <= L
    m = np.where(inner, r**2, 2.5 * L**2 - 2.0 * z**2 + z**4 / (2.0 * L**2))
    dm = np.where(inner, 2.0 * r, -4.0 * z + 2.0 * z**3 / L**2)
    d2m = np.where(inner, 2.0, -4.0 + 6.0 * z**2 / L**2)
    return m, sgn * dm, d2m


def time_factor(t, T: float):
    """Time factor at ``0 < t < T``."""
    arr = np.asarray(t, dtype=float)
    if T <= 0:
        raise ValueError("T must be positive")
    if np.any(arr <= 0) or np.any(arr >= T):
        raise ValueError(f"the time factor is evaluated on the open interval (0, T); got t={t!r}")
    m = _time_factor_parts(arr, T)[0]
    return float(m) if np.ndim(t) == 0 else m


def time_factor_derivatives(t, T: float):
    """Time factor with analytic first and second derivatives on ``(0, T)``."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr <= 0) or np.any(arr >= T):
        raise ValueError("t must lie in (0, T)")
    return _time_factor_parts(arr, T)


# ---------------------------------------------------------------------------
# spatial profile
# ---------------------------------------------------------------------------


def profile_expression(grid: SpaceTimeGrid, partition: BoundaryPartition) -> Expression:
    """Affine weight vanishing on the side opposite an observed side.

    1D: ``x`` when the right end is observed, otherwise ``Lx - x``.
    2D: distance to the side opposite the first observed side in the order
    bottom, right, top, left.
    """
    sides = partition.observed_sides
    if grid.dim == 1:
        L = grid.extents[0]
        return parse("x") if "right" in sides else parse(f"{L!r} - x")
    Lx, Ly = grid.extents
    for side in ("bottom", "right", "top", "left"):
        if side in sides:
            return parse({"bottom": f"{Ly!r} - y", "top": "y", "right": "x", "left": f"{Lx!r} - x"}[side])
    raise ValueError("an explicit profile needs at least one fully observed side")


def build_profile(grid: SpaceTimeGrid, partition: BoundaryPartition) -> ScalarField:
    """Spatial profile sampled on the grid (time-independent, repeated over levels)."""
    return ScalarField(grid, profile_expression(grid, partition).sample(grid))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CarlemanWeights:
    grid: SpaceTimeGrid
    partition: BoundaryPartition
    sharpness: float = 1.0
    strength: float = 1.0
    profile_expr: Expression = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.sharpness <= 0 or self.strength <= 0:
            raise ValueError("sharpness and strength must be positive")
        if self.profile_expr is None:
            object.__setattr__(self, "profile_expr", profile_expression(self.grid, self.partition))

    def with_strength(self, s: float) -> "CarlemanWeights":
        return replace(self, strength=float(s))

    # --- spatial pieces -----------------------------------------------------

    @cached_property
    def profile(self) -> NDArray:
        return self.profile_expr.sample(self.grid)[0]

    @cached_property
    def profile_grad(self) -> NDArray:
        names = "xy"[: self.grid.dim]
        return np.stack([self.profile_expr.diff(v).sample(self.grid)[0] for v in names])

    @cached_property
    def profile_hess(self) -> NDArray:
        names = "xy"[: self.grid.dim]
        d = self.grid.dim
        H = np.empty((d, d, *self.grid.counts))
        for i in range(d):
            for j in range(d):
                H[i, j] = self.profile_expr.diff(names[i]).diff(names[j]).sample(self.grid)[0]
        return H

    @cached_property
    def profile_max(self) -> float:
        return float(np.max(self.profile))

    @cached_property
    def gap(self) -> NDArray:
        """``exp(2 k max p) - exp(k p) > 0``; the exponent is ``-gap / m``."""
        return np.exp(2 * self.sharpness * self.profile_max) - np.exp(self.sharpness * self.profile)

    # --- time pieces --------------------------------------------------------

    @cached_property
    def _tf(self) -> tuple[NDArray, NDArray, NDArray]:
        return _time_factor_parts(self.grid.times, self.grid.T)

    @cached_property
    def inner_levels(self) -> NDArray:
        m = np.ones(self.grid.nt, dtype=bool)
        m[0] = m[-1] = False
        return m

    def _tshape(self, v: NDArray) -> NDArray:
        return v.reshape((-1,) + (1,) * self.grid.dim)

    @cached_property
    def log_time_factor(self) -> NDArray:
        with np.errstate(divide="ignore"):
            return np.log(self._tf[0])

    @cached_property
    def time_factor_log_slope(self) -> NDArray:
        """``m'/m`` per level, 0 at the endpoints."""
        m, dm, _ = self._tf
        out = np.zeros_like(m)
        ok = self.inner_levels
        out[ok] = dm[ok] / m[ok]
        return out

    # --- full space-time arrays (endpoint levels: zero weight) ---------------

    @cached_property
    def log_rate(self) -> NDArray:
        lp = self.sharpness * self.profile[None] - self._tshape(self.log_time_factor)
        lp[~self.inner_levels] = np.inf
        return lp

    @cached_property
    def rate(self) -> NDArray:
        p = np.exp(np.where(self.inner_levels[(slice(None),) + (None,) * self.grid.dim], self.log_rate, 0.0))
        p[~self.inner_levels] = 0.0
        return p

    @cached_property
    def exponent(self) -> NDArray:
        m = self._tf[0]
        a = np.full(self.grid.field_shape, -np.inf)
        ok = self.inner_levels
        a[ok] = -self.gap[None] / m[ok].reshape((-1,) + (1,) * self.grid.dim)
        return a

    @cached_property
    def dt_exponent(self) -> NDArray:
        m, dm, _ = self._tf
        out = np.zeros(self.grid.field_shape)
        ok = self.inner_levels
        out[ok] = self.gap[None] * self._tshape(dm[ok] / m[ok] ** 2)
        return out

    @cached_property
    def dt2_exponent(self) -> NDArray:
        m, dm, d2m = self._tf
        out = np.zeros(self.grid.field_shape)
        ok = self.inner_levels
        out[ok] = self.gap[None] * self._tshape(d2m[ok] / m[ok] ** 2 - 2 * dm[ok] ** 2 / m[ok] ** 3)
        return out

    @cached_property
    def dt_rate(self) -> NDArray:
        return -self.rate * self._tshape(self.time_factor_log_slope)

    @cached_property
    def grad_rate(self) -> NDArray:
        return self.sharpness * self.profile_grad[:, None] * self.rate[None]

    def log_weight(self, s: float | None = None, power: float = 0.0, spow: float = 0.0) -> NDArray:
        """``log(s**spow * rate**power * exp(2 s exponent))``; ``-inf`` at endpoint levels."""
        s = self.strength if s is None else s
        ok = self.inner_levels
        out = np.full(self.grid.field_shape, -np.inf)
        out[ok] = spow * np.log(s) + power * self.log_rate[ok] + 2 * s * self.exponent[ok]
        return out

    def exp_weight(self, s: float | None = None) -> NDArray:
        """``exp(s exponent)`` (underflows to exactly 0)."""
        s = self.strength if s is None else s
        return np.exp(s * self.exponent)

    # --- tilde weights ------------------------------------------------------

    @cached_property
    def mirrored_rate(self) -> NDArray:
        out = np.zeros(self.grid.field_shape)
        ok = self.inner_levels
        out[ok] = np.exp(-self.sharpness * self.profile)[None] / self._tshape(self._tf[0][ok])
        return out

    @cached_property
    def mirrored_exponent(self) -> NDArray:
        out = np.full(self.grid.field_shape, -np.inf)
        ok = self.inner_levels
        num = np.exp(-self.sharpness * self.profile) - np.exp(2 * self.sharpness * self.profile_max)
        out[ok] = num[None] / self._tshape(self._tf[0][ok])
        return out


def weights_at(x, t: float, w: CarlemanWeights) -> tuple[float, float, float]:
    """``(rate, exponent, 2 s exponent)`` at a point ``x`` and time ``t``.

    At ``t = 0`` or ``t = T`` the weight is 0, reported as an exponent and
    log-weight of ``-inf`` with an infinite rate.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (w.grid.dim,):
        raise ValueError(f"point must have {w.grid.dim} coordinates")
    if np.any(x < -1e-12) or np.any(x > np.asarray(w.grid.extents) + 1e-12):
        raise ValueError("point outside the closed domain")
    if not 0.0 <= t <= w.grid.T:
        raise ValueError("t outside [0, T]")
    if t == 0.0 or t == w.grid.T:
        return np.inf, -np.inf, -np.inf
    p = float(w.profile_expr.sample_points(x[None], np.array([t]))[0, 0])
    m = time_factor(t, w.grid.T)
    rate = np.exp(w.sharpness * p) / m
    expo = (np.exp(w.sharpness * p) - np.exp(2 * w.sharpness * w.profile_max)) / m
    return float(rate), float(expo), float(2 * w.strength * expo)


def mirrored_weights_at(x, t: float, w: CarlemanWeights) -> tuple[float, float]:
    """Rate and exponent built from the reflected profile ``-p``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = float(w.profile_expr.sample_points(x[None], np.array([t]))[0, 0])
    m = time_factor(t, w.grid.T)
    top = np.exp(2 * w.sharpness * w.profile_max)
    return float(np.exp(-w.sharpness * p) / m), float((np.exp(-w.sharpness * p) - top) / m)


def check_weight_bounds(power: float, s_grid: Sequence[float], w: CarlemanWeights) -> dict:
    """Sup over grid nodes and ``s_grid`` of ``rate**power * exp(2 s exponent)``.

    Overflow or a non-finite supremum is reported as a violation.
    """
    if any(s < 1 for s in s_grid):
        raise ValueError("s_grid must lie in [1, inf)")
    best = (-np.inf, None, None, None)
    for s in s_grid:
        lw = w.log_weight(s, power=power)
        k = int(np.argmax(lw))
        if lw.flat[k] > best[0]:
            idx = np.unravel_index(k, lw.shape)
            best = (float(lw.flat[k]), idx[1:], idx[0], float(s))
    log_sup, sidx, tidx, s_at = best
    with np.errstate(over="ignore"):
        sup = float(np.exp(log_sup))
    finite = bool(np.isfinite(sup))
    pt = [float(w.grid.axes[i][sidx[i]]) for i in range(w.grid.dim)] if sidx is not None else None
    return {
        "power": float(power),
        "sup": sup if finite else None,
        "log_sup": log_sup,
        "argmax_x": pt[0] if pt and len(pt) == 1 else pt,
        "argmax_t": float(w.grid.times[tidx]) if tidx is not None else None,
        "s_at_sup": s_at,
        "violation": not finite,
    }


def weight_report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)


def derivative_bound_constants(w: CarlemanWeights) -> dict:
    """Smallest constants with ``|d_t rate| <= C rate**2`` and ``|grad rate| <= C rate``."""
    ok = w.inner_levels
    rate = w.rate[ok]
    c_t = float(np.max(np.abs(w.dt_rate[ok]) / rate**2))
    gnorm = np.sqrt(np.sum(w.grad_rate[:, ok] ** 2, axis=0))
    c_x = float(np.max(gnorm / rate))
    return {"time": c_t, "space": c_x}
