"""Coefficient data, second-order operators, Robin traces and weighted conjugation.

Three non-divergence operators act on fields:

* the value operator ``sum a_ij d_i d_j + sum a_j d_j + a_0`` (elliptic part of
  the backward equation),
* the density operator, same form with its own coefficients,
* the cross operator feeding the value field into the density equation.

Every operator is available as a stencil application on arrays and as a
sparse matrix per time level; both use the same second-order stencils from
:mod:`mfglab.grid`, so solver and verifier see identical discretisations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import TYPE_CHECKING, Mapping

import numpy as np
import scipy.sparse as sps

from .expressions import Expression, parse
from .grid import BoundaryPartition, SpaceTimeGrid, d1, d2

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from .weights import CarlemanWeights

# config keys for each block; "diffusion" is a d x d matrix, "drift" a d-vector
BLOCKS = ("value", "density", "cross")
_ROLES = ("diffusion", "drift", "reaction")


class CoefficientError(ValueError):
    pass


def _as_matrix(spec, dim: int, default_diag: str) -> list[list[Expression]]:
    if spec is None:
        return [[parse(default_diag if i == j else 0) for j in range(dim)] for i in range(dim)]
    if dim == 1 and not isinstance(spec, (list, tuple)):
        return [[parse(spec)]]
    rows = [list(r) if isinstance(r, (list, tuple)) else [r] for r in spec]
    if dim == 1 and len(rows) == 1 and len(rows[0]) == 1:
        return [[parse(rows[0][0])]]
    if len(rows) != dim or any(len(r) != dim for r in rows):
        raise CoefficientError(f"diffusion must be a {dim}x{dim} matrix, got {spec!r}")
    return [[parse(e) for e in r] for r in rows]


def _as_vector(spec, dim: int) -> list[Expression]:
    if spec is None:
        return [parse(0)] * dim
    if dim == 1 and not isinstance(spec, (list, tuple)):
        return [parse(spec)]
    if len(spec) != dim:
        raise CoefficientError(f"drift must have {dim} entries, got {spec!r}")
    return [parse(e) for e in spec]


@dataclass(frozen=True)
class Block:
    """Coefficients of one second-order operator on the full space-time grid."""

    diffusion: NDArray  # (d, d, nt, *space)
    drift: NDArray  # (d, nt, *space)
    reaction: NDArray  # (nt, *space)

    def level(self, n: int) -> "Block":
        return Block(self.diffusion[:, :, n], self.drift[:, n], self.reaction[n])

    def scaled(self, c: float) -> "Block":
        return Block(c * self.diffusion, c * self.drift, c * self.reaction)


@dataclass(frozen=True)
class CoefficientSet:
    """All coefficient fields of the linearised system.

    ``coupling`` multiplies the density field in the value equation; the
    ``cross`` block is the operator applied to the value field in the density
    equation.  Robin coefficients are boundary traces ``(nt, nb)``.
    """

    grid: SpaceTimeGrid
    partition: BoundaryPartition
    value: Block
    density: Block
    cross: Block
    coupling: NDArray
    value_robin: NDArray
    density_robin: NDArray
    expressions: Mapping[str, object] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        g = self.grid
        d = g.dim
        for name in BLOCKS:
            b = getattr(self, name)
            if b.diffusion.shape != (d, d, *g.field_shape) or b.drift.shape != (d, *g.field_shape) \
                    or b.reaction.shape != g.field_shape:
                raise CoefficientError(f"{name} coefficient arrays do not match the grid")
            if not (np.all(np.isfinite(b.diffusion)) and np.all(np.isfinite(b.drift))
                    and np.all(np.isfinite(b.reaction))):
                raise CoefficientError(f"{name} coefficients contain non-finite values")
        for name in ("value", "density"):
            D = getattr(self, name).diffusion
            asym = np.max(np.abs(D - np.swapaxes(D, 0, 1)))
            if asym > 1e-12 * max(1.0, np.max(np.abs(D))):
                raise CoefficientError(f"{name} diffusion is not symmetric (max asymmetry {asym:.3e})")
        if self.coupling.shape != g.field_shape:
            raise CoefficientError("coupling array does not match the grid")
        for name in ("value_robin", "density_robin"):
            if getattr(self, name).shape != (g.nt, self.partition.nb):
                raise CoefficientError(f"{name} must be a boundary trace of shape (nt, nb)")

    # --- construction --------------------------------------------------------

    @classmethod
    def from_expressions(cls, grid: SpaceTimeGrid, partition: BoundaryPartition,
                         spec: Mapping[str, object] | None = None, *, check: bool = True) -> "CoefficientSet":
        """Sample closed-form coefficients.

        ``spec`` has optional sub-mappings ``value``, ``density`` and ``cross``
        (keys ``diffusion``, ``drift``, ``reaction``, plus ``robin`` for the
        first two) and a scalar ``coupling``.  Value and density diffusion
        default to the identity; everything else defaults to zero.
        """
        spec = dict(spec or {})
        unknown = set(spec) - {*BLOCKS, "coupling"}
        if unknown:
            raise CoefficientError(f"unknown coefficient sections {sorted(unknown)}")
        d = grid.dim
        exprs: dict[str, object] = {}
        blocks = {}
        for name in BLOCKS:
            sub = dict(spec.get(name) or {})
            allowed = set(_ROLES) | ({"robin"} if name != "cross" else set())
            bad = set(sub) - allowed
            if bad:
                raise CoefficientError(f"unknown keys {sorted(bad)} in coefficients.{name}")
            D = _as_matrix(sub.get("diffusion"), d, "1" if name != "cross" else "0")
            b = _as_vector(sub.get("drift"), d)
            c = parse(sub.get("reaction", 0))
            exprs[name] = {"diffusion": D, "drift": b, "reaction": c}
            blocks[name] = Block(
                np.stack([np.stack([e.sample(grid) for e in row]) for row in D]),
                np.stack([e.sample(grid) for e in b]),
                c.sample(grid),
            )
            if name != "cross":
                exprs[name + "_robin"] = parse(sub.get("robin", 0))
        exprs["coupling"] = parse(spec.get("coupling", 0))
        out = cls(
            grid, partition, blocks["value"], blocks["density"], blocks["cross"],
            exprs["coupling"].sample(grid),
            partition.trace(exprs["value_robin"].sample(grid)),
            partition.trace(exprs["density_robin"].sample(grid)),
            exprs,
        )
        if check:
            out.validate()
        return out

    @classmethod
    def laplacian(cls, grid: SpaceTimeGrid, partition: BoundaryPartition) -> "CoefficientSet":
        return cls.from_expressions(grid, partition, {})

    def replace_arrays(self, **changes) -> "CoefficientSet":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        kw["expressions"] = changes.get("expressions")
        return CoefficientSet(**kw)

    # --- derived data --------------------------------------------------------

    def time_derivative(self) -> "CoefficientSet":
        """Coefficients differentiated in time: analytic when built from
        expressions, centred differences otherwise.  Not validated (the
        derivative of a diffusion matrix need not be elliptic)."""
        g = self.grid
        if self.expressions is not None:
            ex = self.expressions

            def blk(name):
                e = ex[name]
                return Block(
                    np.stack([np.stack([x.diff("t").sample(g) for x in row]) for row in e["diffusion"]]),
                    np.stack([x.diff("t").sample(g) for x in e["drift"]]),
                    e["reaction"].diff("t").sample(g),
                )

            return CoefficientSet(
                g, self.partition, blk("value"), blk("density"), blk("cross"),
                ex["coupling"].diff("t").sample(g),
                self.partition.trace(ex["value_robin"].diff("t").sample(g)),
                self.partition.trace(ex["density_robin"].diff("t").sample(g)),
            )

        def dt(a):
            return d1(a, a.ndim - g.dim - 1, g.tau)

        def blk_fd(b: Block) -> Block:
            return Block(dt(b.diffusion), dt(b.drift), dt(b.reaction))

        return CoefficientSet(
            g, self.partition, blk_fd(self.value), blk_fd(self.density), blk_fd(self.cross),
            dt(self.coupling), d1(self.value_robin, 0, g.tau), d1(self.density_robin, 0, g.tau),
        )

    @cached_property
    def is_time_independent(self) -> bool:
        dc = self.time_derivative()
        arrays = [dc.coupling, dc.value_robin, dc.density_robin]
        for name in BLOCKS:
            b = getattr(dc, name)
            arrays += [b.diffusion, b.drift, b.reaction]
        return all(np.max(np.abs(a)) < 1e-12 for a in arrays)

    def ellipticity(self, which: str = "value") -> float:
        """Smallest eigenvalue of the diffusion matrix over all nodes and levels."""
        D = getattr(self, which).diffusion
        mats = np.moveaxis(D.reshape(D.shape[0], D.shape[1], -1), -1, 0)
        return float(np.min(np.linalg.eigvalsh(mats)))

    def _c1_norm(self, a: NDArray) -> float:
        g = self.grid
        parts = [np.max(np.abs(a)), np.max(np.abs(g.dt(a)))]
        parts += [np.max(np.abs(g.dx(a, i))) for i in range(g.dim)]
        return float(sum(parts))

    def bounds(self) -> dict:
        d = self.grid.dim
        D = self.value.diffusion
        m0 = sum(self._c1_norm(D[i, j]) for i in range(d) for j in range(d))
        m = m0 + sum(float(np.max(np.abs(self.value.drift[j]))) for j in range(d)) \
            + float(np.max(np.abs(self.coupling)))
        return {"coefficient_bound": m, "cross_bound": m0}

    def validation_report(self) -> dict:
        d = self.grid.dim
        rep = {}
        for name in ("value", "density"):
            D = getattr(self, name).diffusion
            rep[name] = {
                "max_asymmetry": float(np.max(np.abs(D - np.swapaxes(D, 0, 1)))) if d > 1 else 0.0,
                "ellipticity": self.ellipticity(name),
            }
        rep["ellipticity"] = min(rep["value"]["ellipticity"], rep["density"]["ellipticity"])
        rep.update(self.bounds())
        return rep

    def validation_json(self) -> str:
        return json.dumps(self.validation_report(), sort_keys=True)

    def validate(self) -> None:
        rep = self.validation_report()
        if rep["ellipticity"] <= 0:
            raise CoefficientError("diffusion is not uniformly elliptic "
                                   f"(smallest eigenvalue {rep['ellipticity']:.3e})")

    def quadratic_form_check(self, rng: np.random.Generator, samples: int = 64, which: str = "value") -> bool:
        """Spot-check ``V.D.V >= ellipticity |V|^2`` at random nodes with random vectors."""
        D = getattr(self, which).diffusion
        floor = self.ellipticity(which)
        d = self.grid.dim
        flat = D.reshape(d, d, -1)
        idx = rng.integers(0, flat.shape[-1], samples)
        vecs = rng.standard_normal((samples, d))
        q = np.einsum("ki,ijk,kj->k", vecs, flat[:, :, idx], vecs)
        return bool(np.all(q >= floor * np.sum(vecs**2, axis=1) - 1e-12))


# ---------------------------------------------------------------------------
# stencil application
# ---------------------------------------------------------------------------


def apply_block(u: NDArray, block: Block, grid: SpaceTimeGrid) -> NDArray:
    """``sum D_ij d_i d_j u + sum b_j d_j u + c u`` at every node.

    ``u`` may be a single level ``(*space)`` or a stack ``(nt, *space)`` matching
    the block's leading shape.
    """
    out = block.reaction * u
    for j in range(grid.dim):
        out = out + block.drift[j] * grid.dx(u, j)
    H = grid.hessian(u)
    for i in range(grid.dim):
        for j in range(grid.dim):
            out = out + block.diffusion[i, j] * H[i, j]
    return out


def apply_value_operator(u: NDArray, level: int | None, c: CoefficientSet) -> NDArray:
    """Value operator on one level (``u`` spatial) or on all levels (``level=None``)."""
    return apply_block(u, c.value if level is None else c.value.level(level), c.grid)


def apply_density_operator(v: NDArray, level: int | None, c: CoefficientSet) -> NDArray:
    return apply_block(v, c.density if level is None else c.density.level(level), c.grid)


def apply_cross_operator(u: NDArray, level: int | None, c: CoefficientSet) -> NDArray:
    return apply_block(u, c.cross if level is None else c.cross.level(level), c.grid)


def conormal_derivative(u: NDArray, diffusion: NDArray, partition: BoundaryPartition) -> NDArray:
    """``sum D_ij (d_j u) nu_i`` at boundary nodes for a full field ``(nt, *space)``."""
    g = partition.grid
    grad = g.grad(u)  # (d, nt, *space)
    flux = np.einsum("ij...,j...->i...", diffusion, grad)
    return partition.normal_derivative(flux)


def robin_residual(u: NDArray, c: CoefficientSet, which: str = "value", data: NDArray | None = None) -> NDArray:
    """``conormal(u) - robin * u - data`` on the boundary, shape ``(nt, nb)``."""
    if which not in ("value", "density"):
        raise ValueError("which must be 'value' or 'density'")
    blk = getattr(c, which)
    robin = c.value_robin if which == "value" else c.density_robin
    res = conormal_derivative(u, blk.diffusion, c.partition) - robin * c.partition.trace(u)
    return res if data is None else res - data


# ---------------------------------------------------------------------------
# sparse matrices
# ---------------------------------------------------------------------------


class StencilMatrices:
    """Sparse derivative matrices acting on flattened spatial arrays."""

    def __init__(self, grid: SpaceTimeGrid) -> None:
        self.grid = grid
        eyes = [sps.identity(n, format="csr") for n in grid.counts]
        first_1d = [sps.csr_matrix(d1(np.eye(n), 0, h)) for n, h in zip(grid.counts, grid.h)]
        second_1d = [sps.csr_matrix(d2(np.eye(n), 0, h)) for n, h in zip(grid.counts, grid.h)]

        def lift(mat, ax):
            mats = [mat if k == ax else eyes[k] for k in range(grid.dim)]
            out = mats[0]
            for m in mats[1:]:
                out = sps.kron(out, m, format="csr")
            return out.tocsr()

        self.first = [lift(first_1d[i], i) for i in range(grid.dim)]
        self.second = {}
        for i in range(grid.dim):
            for j in range(grid.dim):
                self.second[i, j] = lift(second_1d[i], i) if i == j else (self.first[i] @ self.first[j]).tocsr()
        self.identity = sps.identity(grid.n_nodes, format="csr")

    def operator(self, block: Block) -> sps.csr_matrix:
        """Matrix of a single-level block (arrays over space only)."""
        d = self.grid.dim
        op = sps.diags(block.reaction.ravel())
        for j in range(d):
            op = op + sps.diags(block.drift[j].ravel()) @ self.first[j]
        for i in range(d):
            for j in range(d):
                op = op + sps.diags(block.diffusion[i, j].ravel()) @ self.second[i, j]
        return op.tocsr()

    def robin_rows(self, diffusion: NDArray, robin: NDArray, partition: BoundaryPartition) -> sps.csr_matrix:
        """Rows ``conormal - robin * I`` for the boundary nodes, shape ``(nb, n_nodes)``."""
        d = self.grid.dim
        rows = partition.flat_index
        R = sps.csr_matrix((partition.nb, self.grid.n_nodes))
        for i in range(d):
            for j in range(d):
                coef = diffusion[i, j].ravel()[rows] * partition.normals[:, i]
                R = R + sps.diags(coef) @ self.first[j][rows]
        return (R - sps.diags(robin) @ self.identity[rows]).tocsr()


# ---------------------------------------------------------------------------
# weighted conjugation
# ---------------------------------------------------------------------------


def _shift_terms(w: NDArray, logf: NDArray, axis: int, coeffs: dict[int, list[tuple[int, float]]],
                 n: int) -> NDArray:
    """Apply a stencil with neighbour factors ``exp(logf_j - logf_i)``.

    ``coeffs`` maps a row class (-1: first node, 0: interior, 1: last node)
    to ``(offset, weight)`` pairs.  Terms with ``w_j = 0`` contribute 0, so
    infinite log-factors where ``w`` vanishes are harmless.
    """
    W = np.moveaxis(w, axis, 0)
    Lg = np.moveaxis(logf, axis, 0)
    out = np.zeros_like(W)

    def contrib(rows: slice | int, offset: int, weight: float):
        if isinstance(rows, slice):
            i = np.arange(n)[rows]
        else:
            i = np.array([rows % n])
        j = i + offset
        wj = W[j]
        with np.errstate(invalid="ignore", over="ignore"):
            fac = np.exp(Lg[j] - Lg[i])
            term = np.where(wj == 0.0, 0.0, fac * wj)
        out[i] += weight * term

    for off, wt in coeffs[0]:
        contrib(slice(1, n - 1), off, wt)
    for off, wt in coeffs[-1]:
        contrib(0, off, wt)
    for off, wt in coeffs[1]:
        contrib(n - 1, off, wt)
    return np.moveaxis(out, 0, axis)


def _first_coeffs(h: float) -> dict:
    return {0: [(-1, -0.5 / h), (1, 0.5 / h)],
            -1: [(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)],
            1: [(0, 1.5 / h), (-1, -2.0 / h), (-2, 0.5 / h)]}


def _second_coeffs(h: float) -> dict:
    h2 = h * h
    return {0: [(-1, 1 / h2), (0, -2 / h2), (1, 1 / h2)],
            -1: [(0, 2 / h2), (1, -5 / h2), (2, 4 / h2), (3, -1 / h2)],
            1: [(0, 2 / h2), (-1, -5 / h2), (-2, 4 / h2), (-3, -1 / h2)]}


def conjugated_derivative(w: NDArray, logf: NDArray, grid: SpaceTimeGrid, axis: str | int, order: int = 1) -> NDArray:
    """``f^-1 * D(f w)`` with ``f = exp(logf)``, evaluated without forming ``f``.

    ``axis`` is ``"t"`` or a spatial index; ``order`` is 1 or 2 (second order
    uses the 4-point one-sided end stencil, matching :func:`mfglab.grid.d2`).
    """
    if axis == "t":
        ax, h, n = 0, grid.tau, grid.nt
    else:
        ax, h, n = 1 + int(axis), grid.h[int(axis)], grid.counts[int(axis)]
    coeffs = _first_coeffs(h) if order == 1 else _second_coeffs(h)
    return _shift_terms(np.asarray(w, float), logf, ax, coeffs, n)


def _quad(D: NDArray, a: NDArray, b: NDArray) -> NDArray:
    """``sum D_ij a_i b_j`` with ``a``, ``b`` of shape ``(d, ...)``."""
    return np.einsum("ij...,i...,j...->...", D, a, b)


@dataclass(frozen=True)
class ConjugationResult:
    direct: NDArray
    numeric: NDArray

    @property
    def difference(self) -> NDArray:
        return self.direct - self.numeric


def _principal(c: CoefficientSet, which: str) -> NDArray:
    return getattr(c, which).diffusion


def _weight_pieces(weights: CarlemanWeights, s: float):
    g = weights.grid
    k = weights.sharpness
    rate = weights.rate
    grad_p = np.broadcast_to(weights.profile_grad[:, None], (g.dim, *g.field_shape))
    hess_p = np.broadcast_to(weights.profile_hess[:, :, None], (g.dim, g.dim, *g.field_shape))
    return k, rate, grad_p, hess_p, weights.dt_exponent


def conjugate_operator(w: NDArray, weights: CarlemanWeights, c: CoefficientSet, s: float | None = None,
                       which: str = "value") -> ConjugationResult:
    """Weighted principal operator ``exp(s a) (d_t - sum D_ij d_i d_j)(exp(-s a) w)``.

    ``direct`` expands the conjugation analytically in the weight and uses
    grid derivatives of ``w``; ``numeric`` applies the stencils to
    ``exp(-s a) w`` directly, with relative exponents so nothing overflows.
    Both agree to second order in ``h`` and ``tau``.
    """
    g = c.grid
    s = weights.strength if s is None else float(s)
    w = np.asarray(w, float)
    D = _principal(c, which)
    k, rate, gp, hp, dta = _weight_pieces(weights, s)
    grad_w = g.grad(w)
    H = g.hessian(w)
    a_gg = _quad(D, gp, gp)
    tr_dh = np.einsum("ij...,ij...->...", D, hp)
    direct = (g.dt(w) - np.einsum("ij...,ij...->...", D, H)
              + 2 * s * k * rate * _quad(D, gp, grad_w)
              + s * k**2 * rate * a_gg * w
              - s**2 * k**2 * rate**2 * a_gg * w
              + s * k * rate * tr_dh * w
              - s * dta * w)

    if s == 0:
        logf = np.zeros(g.field_shape)
    else:
        with np.errstate(invalid="ignore"):
            logf = -s * weights.exponent  # log of exp(-s a); +inf at endpoint levels
    numeric = conjugated_derivative(w, logf, g, "t", 1)
    for i in range(g.dim):
        for j in range(g.dim):
            if i == j:
                term = conjugated_derivative(w, logf, g, i, 2)
            else:
                term = conjugated_derivative(conjugated_derivative(w, logf, g, j, 1), logf, g, i, 1)
            numeric = numeric - D[i, j] * term
    return ConjugationResult(direct, numeric)


@dataclass(frozen=True)
class SplitResult:
    first: NDArray  # antisymmetric-type part
    second: NDArray  # symmetric-type part
    remainder: NDArray  # right-hand side the two parts must sum to

    @property
    def residual(self) -> NDArray:
        return self.first + self.second - self.remainder


def split_conjugate(w: NDArray, weights: CarlemanWeights, c: CoefficientSet, source: NDArray | None = None,
                    s: float | None = None, which: str = "value") -> SplitResult:
    """Split the conjugated operator into two parts and the matching remainder.

    ``first = d_t w + 2 s k rate D(grad p, grad w) + 2 s k^2 rate D(grad p, grad p) w``,
    ``second = -sum D_ij d_i d_j w - s^2 k^2 rate^2 D(grad p, grad p) w - s (d_t a) w``,
    and for ``w = exp(s a) u`` with ``(d_t - sum D_ij d_i d_j) u = source``

    ``remainder = source exp(s a) + s k^2 rate D(grad p, grad p) w - s k rate tr(D hess p) w``.

    Without ``source`` the weighted source is taken from the numerical
    conjugation of ``w``.
    """
    g = c.grid
    s = weights.strength if s is None else float(s)
    w = np.asarray(w, float)
    D = _principal(c, which)
    k, rate, gp, hp, dta = _weight_pieces(weights, s)
    grad_w = g.grad(w)
    a_gg = _quad(D, gp, gp)
    tr_dh = np.einsum("ij...,ij...->...", D, hp)
    first = g.dt(w) + 2 * s * k * rate * _quad(D, gp, grad_w) + 2 * s * k**2 * rate * a_gg * w
    second = -np.einsum("ij...,ij...->...", D, g.hessian(w)) - s**2 * k**2 * rate**2 * a_gg * w - s * dta * w
    if source is None:
        weighted_source = conjugate_operator(w, weights, c, s, which).numeric
    else:
        weighted_source = np.asarray(source, float) * np.exp(s * weights.exponent)
    remainder = weighted_source + s * k**2 * rate * a_gg * w - s * k * rate * tr_dh * w
    return SplitResult(first, second, remainder)
