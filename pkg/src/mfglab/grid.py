"""Space-time tensor grids, boundary partitions and trapezoidal quadrature.

Field arrays are stored time-first: shape ``(nt, nx)`` in 1D and
``(nt, nx, ny)`` in 2D, with ``'ij'`` indexing of the spatial axes.
Boundary traces are stored as ``(nt, nb)`` arrays over the boundary
node list of a :class:`BoundaryPartition`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import NDArray

OBSERVED = "OBSERVED"
UNOBSERVED = "UNOBSERVED"
ALL = "ALL"

SIDES_1D = ("left", "right")
SIDES_2D = ("bottom", "right", "top", "left")


# ---------------------------------------------------------------------------
# one-dimensional stencils (second order everywhere)
# ---------------------------------------------------------------------------


def d1(arr: NDArray, axis: int, h: float) -> NDArray:
    """First derivative: central inside, 3-point one-sided at both ends."""
    return np.gradient(arr, h, axis=axis, edge_order=2)


def d2(arr: NDArray, axis: int, h: float) -> NDArray:
    """Second derivative: central 3-point inside, 4-point one-sided at the ends."""
    a = np.moveaxis(np.asarray(arr, dtype=float), axis, 0)
    n = a.shape[0]
    if n < 4:
        raise ValueError("second differences need at least 4 nodes along the axis")
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2.0 * a[1:-1] + a[:-2]) / h**2
    out[0] = (2.0 * a[0] - 5.0 * a[1] + 4.0 * a[2] - a[3]) / h**2
    out[-1] = (2.0 * a[-1] - 5.0 * a[-2] + 4.0 * a[-3] - a[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def trapezoid_weights(n: int, h: float) -> NDArray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor mesh of ``Omega x [0, T]`` with Omega an interval or rectangle."""

    extents: tuple[float, ...]
    counts: tuple[int, ...]
    T: float
    nt: int

    def __post_init__(self) -> None:
        if len(self.extents) not in (1, 2) or len(self.extents) != len(self.counts):
            raise ValueError("grid must be 1D or 2D with one count per extent")
        if any(not np.isfinite(L) or L <= 0 for L in self.extents):
            raise ValueError(f"extents must be positive, got {self.extents}")
        if any(int(n) != n or n < 3 for n in self.counts):
            raise ValueError(f"node counts must be integers >= 3, got {self.counts}")
        if not np.isfinite(self.T) or self.T <= 0:
            raise ValueError(f"time horizon must be positive, got {self.T}")
        if int(self.nt) != self.nt or self.nt < 3:
            raise ValueError(f"time-level count must be >= 3, got {self.nt}")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(L / (n - 1) for L, n in zip(self.extents, self.counts))

    @property
    def tau(self) -> float:
        return self.T / (self.nt - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.counts)

    @property
    def field_shape(self) -> tuple[int, ...]:
        return (self.nt, *self.counts)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    @cached_property
    def axes(self) -> tuple[NDArray, ...]:
        return tuple(np.linspace(0.0, L, n) for L, n in zip(self.extents, self.counts))

    @cached_property
    def times(self) -> NDArray:
        return np.linspace(0.0, self.T, self.nt)

    @cached_property
    def coords(self) -> tuple[NDArray, ...]:
        """Spatial coordinate arrays of shape ``counts``."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def points(self) -> NDArray:
        """Flattened node coordinates, shape ``(n_nodes, dim)``."""
        return np.stack([c.ravel() for c in self.coords], axis=-1)

    @cached_property
    def space_weights(self) -> NDArray:
        w = trapezoid_weights(self.counts[0], self.h[0])
        for n, h in zip(self.counts[1:], self.h[1:]):
            w = np.multiply.outer(w, trapezoid_weights(n, h))
        return w

    @cached_property
    def time_weights(self) -> NDArray:
        return trapezoid_weights(self.nt, self.tau)

    @cached_property
    def boundary_mask(self) -> NDArray:
        mask = np.zeros(self.counts, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    # derivative helpers on field arrays (time axis first)

    def dt(self, arr: NDArray) -> NDArray:
        return d1(arr, 0, self.tau)

    def dx(self, arr: NDArray, i: int) -> NDArray:
        return d1(arr, arr.ndim - self.dim + i, self.h[i])

    def dxx(self, arr: NDArray, i: int, j: int) -> NDArray:
        off = arr.ndim - self.dim
        if i == j:
            return d2(arr, off + i, self.h[i])
        return d1(d1(arr, off + i, self.h[i]), off + j, self.h[j])

    def grad(self, arr: NDArray) -> NDArray:
        return np.stack([self.dx(arr, i) for i in range(self.dim)])

    def hessian(self, arr: NDArray) -> NDArray:
        d = self.dim
        H = np.empty((d, d, *np.shape(arr)))
        for i in range(d):
            for j in range(i, d):
                H[i, j] = self.dxx(arr, i, j)
                H[j, i] = H[i, j]
        return H

    def time_slice(self, t_lo: float, t_hi: float) -> NDArray:
        """Indices of time levels inside ``[t_lo, t_hi]`` (round-off tolerant)."""
        slack = 1e-9 * self.tau
        return np.nonzero((self.times >= t_lo - slack) & (self.times <= t_hi + slack))[0]


def build_grid(extents: Iterable[float], counts: Iterable[int], T: float, nt: int) -> SpaceTimeGrid:
    return SpaceTimeGrid(tuple(float(e) for e in extents), tuple(int(n) for n in counts), float(T), int(nt))


# ---------------------------------------------------------------------------
# boundary partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryPartition:
    """Boundary nodes of the grid, each labelled OBSERVED (Gamma) or UNOBSERVED.

    In 2D the boundary is traversed counter-clockwise from the origin; each
    corner appears once and carries the normal of its left/right side.
    Boundary edges belong to exactly one side, which makes segment integrals
    additive.
    """

    grid: SpaceTimeGrid
    observed_sides: frozenset[str]
    index: NDArray  # (nb, dim) multi-indices into the spatial array
    normals: NDArray  # (nb, dim)
    observed: NDArray  # (nb,) bool
    edges: NDArray = field(repr=False)  # (ne, 2) node ids along the boundary loop
    edge_sides: tuple[str, ...] = field(repr=False)

    @property
    def nb(self) -> int:
        return len(self.index)

    @cached_property
    def flat_index(self) -> NDArray:
        return np.ravel_multi_index(tuple(self.index.T), self.grid.counts)

    @cached_property
    def points(self) -> NDArray:
        return self.grid.points[self.flat_index]

    @cached_property
    def tangents(self) -> NDArray:
        if self.grid.dim == 1:
            return np.zeros_like(self.normals)
        return np.stack([-self.normals[:, 1], self.normals[:, 0]], axis=-1)

    def segment_sides(self, segment: str) -> set[str]:
        sides = set(SIDES_1D if self.grid.dim == 1 else SIDES_2D)
        if segment == ALL:
            return sides
        if segment == OBSERVED:
            return set(self.observed_sides)
        if segment == UNOBSERVED:
            return sides - set(self.observed_sides)
        raise ValueError(f"unknown boundary segment {segment!r}")

    def node_weights(self, segment: str = ALL) -> NDArray:
        """Arc-length trapezoid weights of each boundary node within ``segment``.

        In 1D the boundary is two points with unit (counting) weight.
        """
        if self.grid.dim == 1:
            if segment == ALL:
                return np.ones(self.nb)
            want = self.observed if segment == OBSERVED else ~self.observed
            if segment not in (OBSERVED, UNOBSERVED):
                raise ValueError(f"unknown boundary segment {segment!r}")
            return want.astype(float)
        sides = self.segment_sides(segment)
        w = np.zeros(self.nb)
        pts = self.points
        for (a, b), side in zip(self.edges, self.edge_sides):
            if side in sides:
                half = 0.5 * np.linalg.norm(pts[a] - pts[b])
                w[a] += half
                w[b] += half
        return w

    def trace(self, arr: NDArray) -> NDArray:
        """Restrict a field array (time-first) to the boundary nodes."""
        arr = np.asarray(arr)
        flat = arr.reshape(arr.shape[: arr.ndim - self.grid.dim] + (-1,))
        return flat[..., self.flat_index]

    def normal_derivative(self, grad: NDArray) -> NDArray:
        """``grad . normal`` at boundary nodes for a gradient array ``(dim, nt, *space)``."""
        g = np.stack([self.trace(gi) for gi in grad])  # (dim, nt, nb)
        return np.einsum("dtb,bd->tb", g, self.normals)

    def tangential_derivative(self, grad: NDArray) -> NDArray:
        g = np.stack([self.trace(gi) for gi in grad])
        return np.einsum("dtb,bd->tb", g, self.tangents)


def _side_of(name: str, grid: SpaceTimeGrid) -> str:
    key = name.strip().lower().replace(" ", "")
    if key in SIDES_2D:
        return key
    for ax, letter in enumerate("xy"[: grid.dim]):
        if key.startswith(letter + "="):
            val = float(key[2:])
            if np.isclose(val, 0.0):
                return "left" if ax == 0 else "bottom"
            if np.isclose(val, grid.extents[ax]):
                return "right" if ax == 0 else "top"
    raise ValueError(f"cannot interpret boundary selector {name!r}")


def partition_boundary(grid: SpaceTimeGrid, observed: Iterable[str]) -> BoundaryPartition:
    """Label boundary nodes; ``observed`` lists the observed sides.

    Sides are ``left``/``right`` (x = 0 / x = Lx) and in 2D also
    ``bottom``/``top`` (y = 0 / y = Ly); ``"x=1"``-style selectors are accepted.
    """
    sides = frozenset(_side_of(g, grid) for g in observed)
    allowed = SIDES_1D if grid.dim == 1 else SIDES_2D
    if not sides:
        raise ValueError("observed boundary Gamma must be non-empty")
    if not sides <= set(allowed):
        raise ValueError(f"sides {sorted(sides - set(allowed))} do not exist in {grid.dim}D")

    if grid.dim == 1:
        nx = grid.counts[0]
        index = np.array([[0], [nx - 1]])
        normals = np.array([[-1.0], [1.0]])
        node_sides = [("left",), ("right",)]
        edges = np.zeros((0, 2), dtype=int)
        edge_sides: tuple[str, ...] = ()
    else:
        nx, ny = grid.counts
        loop: list[tuple[int, int]] = []
        loop += [(i, 0) for i in range(nx - 1)]  # bottom, x increasing
        loop += [(nx - 1, j) for j in range(ny - 1)]  # right, y increasing
        loop += [(i, ny - 1) for i in range(nx - 1, 0, -1)]  # top, x decreasing
        loop += [(0, j) for j in range(ny - 1, 0, -1)]  # left, y decreasing
        index = np.array(loop)
        nb = len(loop)
        normals = np.zeros((nb, 2))
        node_sides = []
        for k, (i, j) in enumerate(loop):
            ns = []
            if j == 0:
                ns.append("bottom")
            if i == nx - 1:
                ns.append("right")
            if j == ny - 1:
                ns.append("top")
            if i == 0:
                ns.append("left")
            node_sides.append(tuple(ns))
            if i == 0:
                normals[k] = (-1.0, 0.0)
            elif i == nx - 1:
                normals[k] = (1.0, 0.0)
            elif j == 0:
                normals[k] = (0.0, -1.0)
            else:
                normals[k] = (0.0, 1.0)
        edges = np.array([(k, (k + 1) % nb) for k in range(nb)])
        edge_sides = tuple(
            ("bottom", "right", "top", "left")[
                0 if k < nx - 1 else 1 if k < nx + ny - 2 else 2 if k < 2 * nx + ny - 3 else 3
            ]
            for k in range(nb)
        )
    observed = np.array([any(s in sides for s in ns) for ns in node_sides])
    return BoundaryPartition(grid, sides, index, normals, observed, edges, edge_sides)


# ---------------------------------------------------------------------------
# fields and quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarField:
    grid: SpaceTimeGrid
    values: NDArray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.field_shape:
            raise ValueError(f"field shape {vals.shape} does not match grid {self.grid.field_shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", vals)

    def to_csv(self, path=None, header_comment: str | None = None) -> str:
        return field_to_csv(self.grid, self.values, path, header_comment)


def _vals(f) -> NDArray:
    return f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=float)


def integrate_interior(f, grid: SpaceTimeGrid | None = None) -> float:
    """Trapezoidal space-time quadrature of ``f`` over ``Q``."""
    if isinstance(f, ScalarField):
        grid = f.grid
    if grid is None:
        raise ValueError("grid required for raw arrays")
    vals = _vals(f)
    if vals.shape != grid.field_shape:
        raise ValueError(f"field shape {vals.shape} does not match grid {grid.field_shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("integrand contains non-finite values")
    wq = np.multiply.outer(grid.time_weights, grid.space_weights)
    return float(np.sum(wq * vals))


def integrate_boundary(trace, partition: BoundaryPartition, segment: str = ALL,
                       time_weights: NDArray | None = None) -> float:
    """Quadrature of a boundary trace ``(nt, nb)`` over ``segment x (0, T)``."""
    tr = np.asarray(trace, dtype=float)
    if tr.shape != (partition.grid.nt, partition.nb):
        raise ValueError(f"trace shape {tr.shape} != {(partition.grid.nt, partition.nb)}")
    if not np.all(np.isfinite(tr)):
        raise ValueError("trace contains non-finite values")
    w = partition.node_weights(segment)
    if not np.any(w > 0):
        raise ValueError(f"boundary segment {segment} contains no nodes")
    wt = partition.grid.time_weights if time_weights is None else time_weights
    return float(wt @ tr @ w)


# ---------------------------------------------------------------------------
# CSV serialisation
# ---------------------------------------------------------------------------


def field_to_csv(grid: SpaceTimeGrid, values: NDArray, path=None, header_comment: str | None = None) -> str:
    """Write ``x[,y],t,value`` rows; returns the text."""
    values = np.asarray(values, dtype=float)
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["x"] if grid.dim == 1 else ["x", "y"]) + ["t", "value"])
    pts = grid.points
    for n, t in enumerate(grid.times):
        flat = values[n].ravel()
        for k in range(grid.n_nodes):
            w.writerow([repr(float(c)) for c in pts[k]] + [repr(float(t)), repr(float(flat[k]))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def field_from_csv(grid: SpaceTimeGrid, text_or_path) -> NDArray:
    if "\n" not in str(text_or_path):
        with open(text_or_path, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = str(text_or_path)
    rows = [r for r in csv.reader(line for line in text.splitlines() if line and not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    expected = (["x"] if grid.dim == 1 else ["x", "y"]) + ["t", "value"]
    if header != expected:
        raise ValueError(f"unexpected CSV header {header}, expected {expected}")
    if len(body) != grid.nt * grid.n_nodes:
        raise ValueError("CSV row count does not match grid")
    vals = np.array([float(r[-1]) for r in body]).reshape(grid.field_shape)
    return vals
