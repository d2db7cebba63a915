"""Theta-scheme solvers for the coupled backward/forward system.

The linearised system reads

    d_t u + A u = c v + F,      conormal_A u - p u = g,   u(T) given,
    d_t v - B v = K u + G,      conormal_B v - q v = h,   v(0) given,

with ``A``, ``B`` elliptic and ``K`` an arbitrary second-order operator.  The
first equation is marched from ``T`` down to 0, the second from 0 up to
``T``; the two are coupled by a lagged Picard sweep.  All marchers accept
a trailing batch axis, so sensitivity columns are solved together.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterator

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .expressions import Expression, parse
from .grid import BoundaryPartition, SpaceTimeGrid, field_from_csv, field_to_csv
from .operators import Block, CoefficientSet, StencilMatrices

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A per-level linear solve failed."""

    def __init__(self, message: str, level: int | None = None) -> None:
        super().__init__(message if level is None else f"{message} (time level {level})")
        self.level = level


class MaxIterationsExceeded(SolverError):
    def __init__(self, iterations: int, update_norm: float, history: list[float]) -> None:
        super().__init__(f"Picard iteration did not converge in {iterations} sweeps "
                         f"(last relative update {update_norm:.3e})")
        self.iterations = iterations
        self.update_norm = update_norm
        self.history = history


@dataclass(frozen=True)
class SolveOptions:
    theta: float = 0.5
    tol: float = 1e-8
    max_iter: int = 50
    linear_tol: float = 1e-10

    def __post_init__(self) -> None:
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [1/2, 1]")
        if self.tol <= 0 or self.linear_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemData:
    """Sources, Robin data and end-time states; a trailing batch axis is allowed."""

    grid: SpaceTimeGrid
    partition: BoundaryPartition
    value_source: NDArray  # (nt, *space[, k])
    density_source: NDArray
    value_flux: NDArray  # (nt, nb[, k])
    density_flux: NDArray
    value_terminal: NDArray  # (*space[, k])
    density_initial: NDArray

    def __post_init__(self) -> None:
        g = self.grid
        batch = self.value_source.shape[len(g.field_shape):]
        expect = {
            "value_source": g.field_shape + batch,
            "density_source": g.field_shape + batch,
            "value_flux": (g.nt, self.partition.nb) + batch,
            "density_flux": (g.nt, self.partition.nb) + batch,
            "value_terminal": g.shape + batch,
            "density_initial": g.shape + batch,
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    _ARRAYS = ("value_source", "density_source", "value_flux", "density_flux", "value_terminal", "density_initial")

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.value_source.shape[len(self.grid.field_shape):]

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid, partition: BoundaryPartition, batch: tuple[int, ...] = ()) -> "SystemData":
        nb = partition.nb
        return cls(grid, partition, np.zeros(grid.field_shape + batch), np.zeros(grid.field_shape + batch),
                   np.zeros((grid.nt, nb) + batch), np.zeros((grid.nt, nb) + batch),
                   np.zeros(grid.shape + batch), np.zeros(grid.shape + batch))

    def arrays(self) -> dict[str, NDArray]:
        return {k: getattr(self, k) for k in self._ARRAYS}

    def replace(self, **changes) -> "SystemData":
        kw = self.arrays()
        kw.update(changes)
        return SystemData(self.grid, self.partition, **kw)

    def scaled(self, c: float) -> "SystemData":
        return self.replace(**{k: c * v for k, v in self.arrays().items()})

    def __add__(self, other: "SystemData") -> "SystemData":
        return self.replace(**{k: v + getattr(other, k) for k, v in self.arrays().items()})

    def __sub__(self, other: "SystemData") -> "SystemData":
        return self.replace(**{k: v - getattr(other, k) for k, v in self.arrays().items()})

    def save_bundle(self, directory, config_hash: str | None = None) -> Path:
        """CSV per array plus ``manifest.json``."""
        if self.batch_shape:
            raise ValueError("only unbatched data can be exported")
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        g = self.grid
        files = {}
        comment = f"config_hash={config_hash}" if config_hash else None
        for name in ("value_source", "density_source"):
            field_to_csv(g, getattr(self, name), out / f"{name}.csv", comment)
            files[name] = f"{name}.csv"
        for name in ("value_flux", "density_flux"):
            _trace_to_csv(self.partition, getattr(self, name), out / f"{name}.csv", comment)
            files[name] = f"{name}.csv"
        for name in ("value_terminal", "density_initial"):
            np.savetxt(out / f"{name}.csv", np.atleast_2d(getattr(self, name).ravel()), delimiter=",",
                       header=comment or "", fmt="%.17g")
            files[name] = f"{name}.csv"
        manifest = {"extents": list(g.extents), "counts": list(g.counts), "T": g.T, "nt": g.nt,
                    "observed": sorted(self.partition.observed_sides), "files": files}
        if config_hash:
            manifest["config_hash"] = config_hash
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load_bundle(cls, directory, grid: SpaceTimeGrid, partition: BoundaryPartition) -> "SystemData":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if tuple(manifest["counts"]) != grid.counts or manifest["nt"] != grid.nt:
            raise ValueError("bundle grid does not match")
        kw = {}
        for name in ("value_source", "density_source"):
            kw[name] = field_from_csv(grid, d / manifest["files"][name])
        for name in ("value_flux", "density_flux"):
            kw[name] = _trace_from_csv(partition, d / manifest["files"][name])
        for name in ("value_terminal", "density_initial"):
            kw[name] = np.loadtxt(d / manifest["files"][name], delimiter=",").reshape(grid.shape)
        return cls(grid, partition, **kw)


def _trace_to_csv(partition: BoundaryPartition, trace: NDArray, path, comment: str | None) -> None:
    g = partition.grid
    lines = [f"# {comment}"] if comment else []
    lines.append(",".join((["x"] if g.dim == 1 else ["x", "y"]) + ["t", "value"]))
    pts = partition.points
    for n, t in enumerate(g.times):
        for k in range(partition.nb):
            lines.append(",".join([repr(float(c)) for c in pts[k]] + [repr(float(t)), repr(float(trace[n, k]))]))
    Path(path).write_text("\n".join(lines) + "\n")


def _trace_from_csv(partition: BoundaryPartition, path) -> NDArray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")][1:]
    vals = np.array([float(r.rsplit(",", 1)[1]) for r in rows])
    return vals.reshape(partition.grid.nt, partition.nb)


@dataclass
class SolveResult:
    value: NDArray
    density: NDArray
    iterations: int
    update_norms: list[float] = field(default_factory=list)

    def __iter__(self) -> Iterator:
        return iter((self.value, self.density, self.iterations))

    def history_jsonl(self) -> str:
        return "".join(json.dumps({"iteration": k + 1, "update": float(r)}) + "\n"
                       for k, r in enumerate(self.update_norms))

    @property
    def contraction_ratios(self) -> NDArray:
        u = np.asarray(self.update_norms[1:], float)
        return u[1:] / u[:-1] if len(u) > 1 else np.array([])


# ---------------------------------------------------------------------------
# per-level linear solves
# ---------------------------------------------------------------------------


class _LevelSystem:
    """``I - theta tau Op`` with Robin rows on the boundary, factorised once."""

    def __init__(self, mat: sps.csr_matrix, grid: SpaceTimeGrid, level: int, linear_tol: float) -> None:
        self.level = level
        self.linear_tol = linear_tol
        self.mat = mat
        self._norm = float(abs(mat).sum(axis=1).max())
        if grid.dim == 1:
            n = mat.shape[0]
            dense = mat.toarray()
            lo = up = 2
            if np.any(np.abs(np.tril(dense, -lo - 1)) > 0) or np.any(np.abs(np.triu(dense, up + 1)) > 0):
                raise SolverError("1D system is not pentadiagonal", level)
            ab = np.zeros((lo + up + 1, n))
            for k in range(-lo, up + 1):
                diag = np.diagonal(dense, k)
                if k >= 0:
                    ab[up - k, k:] = diag
                else:
                    ab[up - k, : n + k] = diag
            self._banded = ab
            self._lu = None
        else:
            try:
                self._lu = spla.splu(mat.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"sparse LU failed: {exc}", level) from None

    def solve(self, rhs: NDArray) -> NDArray:
        if self._lu is None:
            try:
                x = sla.solve_banded((2, 2), self._banded, rhs, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise SolverError(f"banded solve failed: {exc}", self.level) from None
        else:
            x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("linear solve produced non-finite values", self.level)
        res = self.mat @ x - rhs
        scale = float(np.max(np.abs(rhs))) + self._norm * float(np.max(np.abs(x)))
        if scale > 0 and float(np.max(np.abs(res))) > self.linear_tol * scale:
            raise SolverError(f"linear solve residual {np.max(np.abs(res)):.3e} too large", self.level)
        return x


def _flat(arr: NDArray, grid: SpaceTimeGrid) -> NDArray:
    """``(*space[, k])`` -> ``(n_nodes[, k])``."""
    return arr.reshape((grid.n_nodes,) + arr.shape[grid.dim:])


def _unflat(arr: NDArray, grid: SpaceTimeGrid) -> NDArray:
    return arr.reshape(grid.shape + arr.shape[1:])


class LinearizedSolver:
    """Marchers and Picard driver for fixed coefficients; matrices are cached."""

    def __init__(self, coeffs: CoefficientSet, opts: SolveOptions | None = None,
                 stencils: StencilMatrices | None = None) -> None:
        self.c = coeffs
        self.opts = opts or SolveOptions()
        self.grid = coeffs.grid
        self.partition = coeffs.partition
        self.S = stencils or StencilMatrices(self.grid)
        self._ops: dict = {}
        self._systems: dict = {}

    # --- cached matrices -----------------------------------------------------

    def _op(self, name: str, n: int) -> sps.csr_matrix:
        key = (name, n)
        if key not in self._ops:
            self._ops[key] = self.S.operator(getattr(self.c, name).level(n))
        return self._ops[key]

    def _system(self, name: str, n: int) -> _LevelSystem:
        key = (name, n)
        if key not in self._systems:
            g = self.grid
            theta, tau = self.opts.theta, g.tau
            mat = (self.S.identity - theta * tau * self._op(name, n)).tolil()
            robin = self.c.value_robin[n] if name == "value" else self.c.density_robin[n]
            R = self.S.robin_rows(getattr(self.c, name).diffusion[:, :, n], robin, self.partition)
            rows = self.partition.flat_index
            mat[rows, :] = R
            self._systems[key] = _LevelSystem(mat.tocsr(), g, n, self.opts.linear_tol)
        return self._systems[key]

    def _apply(self, name: str, n: int, x: NDArray) -> NDArray:
        return self._op(name, n) @ x

    # --- marchers ------------------------------------------------------------

    def step_backward(self, density: NDArray, data: SystemData) -> NDArray:
        """Backward march of the value equation for a given density field."""
        g = self.grid
        theta, tau = self.opts.theta, g.tau
        rows = self.partition.flat_index
        batch = data.batch_shape
        c = self.c.coupling.reshape(g.field_shape + (1,) * len(batch))
        r = c * density + data.value_source  # right-hand side of d_t u + A u = r
        out = np.empty(g.field_shape + batch)
        out[-1] = data.value_terminal
        prev = _flat(data.value_terminal, g)
        for n in range(g.nt - 2, -1, -1):
            rhs = prev + tau * (1 - theta) * self._apply("value", n + 1, prev) \
                - tau * (theta * _flat(r[n], g) + (1 - theta) * _flat(r[n + 1], g))
            rhs[rows] = data.value_flux[n]
            prev = self._system("value", n).solve(rhs)
            out[n] = _unflat(prev, g)
        return out

    def step_forward(self, value: NDArray, data: SystemData) -> NDArray:
        """Forward march of the density equation for a given value field."""
        g = self.grid
        theta, tau = self.opts.theta, g.tau
        rows = self.partition.flat_index
        batch = data.batch_shape
        src = [None] * g.nt

        def source(n):
            if src[n] is None:
                src[n] = self._apply("cross", n, _flat(value[n], g)) + _flat(data.density_source[n], g)
            return src[n]

        out = np.empty(g.field_shape + batch)
        out[0] = data.density_initial
        prev = _flat(data.density_initial, g)
        for n in range(g.nt - 1):
            rhs = prev + tau * (1 - theta) * (self._apply("density", n, prev) + source(n)) + tau * theta * source(n + 1)
            rhs[rows] = data.density_flux[n + 1]
            prev = self._system("density", n + 1).solve(rhs)
            out[n + 1] = _unflat(prev, g)
        return out

    # --- Picard --------------------------------------------------------------

    def _norm(self, arr: NDArray) -> float:
        g = self.grid
        wq = np.multiply.outer(g.time_weights, g.space_weights)
        wq = wq.reshape(wq.shape + (1,) * (arr.ndim - wq.ndim))
        return float(np.sqrt(np.sum(wq * arr**2)))

    def solve(self, data: SystemData) -> SolveResult:
        g = self.grid
        batch = data.batch_shape
        u = np.zeros(g.field_shape + batch)
        v = np.zeros(g.field_shape + batch)
        history: list[float] = []
        for k in range(1, self.opts.max_iter + 1):
            u_new = self.step_backward(v, data)
            v_new = self.step_forward(u_new, data)
            upd = np.hypot(self._norm(u_new - u), self._norm(v_new - v))
            size = np.hypot(self._norm(u_new), self._norm(v_new))
            rel = upd / size if size > 0 else 0.0
            history.append(float(rel))
            log.debug("picard sweep %d: relative update %.3e", k, rel)
            u, v = u_new, v_new
            if upd <= self.opts.tol * size:
                return SolveResult(u, v, k, history)
        raise MaxIterationsExceeded(self.opts.max_iter, history[-1], history)

    def fixed_point_residual(self, value: NDArray, density: NDArray, data: SystemData) -> float:
        """Relative L2(Q) distance of ``(value, density)`` from one more sweep."""
        u = self.step_backward(density, data)
        v = self.step_forward(u, data)
        num = np.hypot(self._norm(u - value), self._norm(v - density))
        den = np.hypot(self._norm(value), self._norm(density))
        return num / den if den > 0 else num


def step_backward_u(density: NDArray, data: SystemData, c: CoefficientSet, opts: SolveOptions | None = None) -> NDArray:
    return LinearizedSolver(c, opts).step_backward(density, data)


def step_forward_v(value: NDArray, data: SystemData, c: CoefficientSet, opts: SolveOptions | None = None) -> NDArray:
    return LinearizedSolver(c, opts).step_forward(value, data)


def solve_linearized(data: SystemData, c: CoefficientSet, opts: SolveOptions | None = None) -> SolveResult:
    return LinearizedSolver(c, opts).solve(data)


# ---------------------------------------------------------------------------
# manufactured data
# ---------------------------------------------------------------------------


def _block_expr(block: dict, target: Expression, dim: int) -> Expression:
    names = "xy"[:dim]
    out = block["reaction"] * target
    for j in range(dim):
        out = out + block["drift"][j] * target.diff(names[j])
        for i in range(dim):
            out = out + block["diffusion"][i][j] * target.diff(names[i]).diff(names[j])
    return out


def _flux_trace(target: Expression, diffusion, robin: Expression, partition: BoundaryPartition) -> NDArray:
    g = partition.grid
    names = "xy"[: g.dim]
    grads = [partition.trace(target.diff(n).sample(g)) for n in names]
    out = -partition.trace(robin.sample(g)) * partition.trace(target.sample(g))
    for i in range(g.dim):
        for j in range(g.dim):
            out = out + partition.trace(diffusion[i][j].sample(g)) * grads[j] * partition.normals[:, i]
    return out


def manufacture(value_expr, density_expr, c: CoefficientSet) -> SystemData:
    """Data making ``(value_expr, density_expr)`` an exact solution."""
    if c.expressions is None:
        raise ValueError("manufactured data needs coefficients built from expressions")
    g = c.grid
    u = parse(value_expr)
    v = parse(density_expr)
    ex = c.expressions
    F = u.diff("t") + _block_expr(ex["value"], u, g.dim) - ex["coupling"] * v
    G = v.diff("t") - _block_expr(ex["density"], v, g.dim) - _block_expr(ex["cross"], u, g.dim)
    return SystemData(
        g, c.partition,
        F.sample(g), G.sample(g),
        _flux_trace(u, ex["value"]["diffusion"], ex["value_robin"], c.partition),
        _flux_trace(v, ex["density"]["diffusion"], ex["density_robin"], c.partition),
        u.sample(g)[-1], v.sample(g)[0],
    )


# ---------------------------------------------------------------------------
# nonlinear system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonlinearCoefficients:
    """Diffusivity ``a > 0``, gradient-coupling strength and density coupling."""

    grid: SpaceTimeGrid
    partition: BoundaryPartition
    diffusivity: Expression
    gradient_coupling: Expression
    coupling: Expression

    @classmethod
    def from_expressions(cls, grid: SpaceTimeGrid, partition: BoundaryPartition, diffusivity="1",
                         gradient_coupling="0", coupling="0") -> "NonlinearCoefficients":
        out = cls(grid, partition, parse(diffusivity), parse(gradient_coupling), parse(coupling))
        a = out.diffusivity.sample(grid)
        if np.min(a) <= 0:
            raise ValueError(f"diffusivity must be positive on the closed domain (min {np.min(a):.3e})")
        return out

    @property
    def bounds(self) -> dict:
        g = self.grid
        return {name: float(np.max(np.abs(getattr(self, name).sample(g))))
                for name in ("diffusivity", "gradient_coupling", "coupling")}


class NonlinearSolver:
    """Picard linearisation of the nonlinear value/density system.

    Value equation: ``d_t u + a lap u - k/2 |grad u|^2 + c v = F`` with
    ``grad u . normal = g``; density equation:
    ``d_t v - lap(a v) - div(k v grad u) = G`` with ``grad(a v) . normal = h``.
    The quadratic gradient term and the transport velocity use the previous
    iterate of ``u``.
    """

    def __init__(self, nc: NonlinearCoefficients, opts: SolveOptions | None = None) -> None:
        self.nc = nc
        self.opts = opts or SolveOptions()
        g = nc.grid
        self.grid = g
        self.partition = nc.partition
        self.S = StencilMatrices(g)
        d = g.dim
        names = "xy"[:d]
        self.diffusivity = nc.diffusivity.sample(g)
        self.diffusivity_grad = np.stack([nc.diffusivity.diff(n).sample(g) for n in names])
        self.diffusivity_lap = sum(nc.diffusivity.diff(n).diff(n).sample(g) for n in names)
        self.gradient_coupling = nc.gradient_coupling.sample(g)
        self.gradient_coupling_grad = np.stack([nc.gradient_coupling.diff(n).sample(g) for n in names])
        self.c0 = nc.coupling.sample(g)
        eye = np.eye(d).reshape(d, d, *([1] * (d + 1)))
        self.diff = eye * self.diffusivity[None, None]
        normal_diffusivity = self.partition.normal_derivative(self.diffusivity_grad)
        zero_b = np.zeros((g.nt, self.partition.nb))
        self._base = dict(grid=g, partition=self.partition, coupling=-self.c0,
                          value_robin=zero_b, density_robin=-normal_diffusivity)

    def coefficients(self, value: NDArray) -> CoefficientSet:
        """Linear coefficients frozen at the value iterate."""
        g = self.grid
        grad_u = g.grad(value)
        lap_u = sum(g.dxx(value, i, i) for i in range(g.dim))
        zero = np.zeros(g.field_shape)
        vblock = Block(self.diff, -0.5 * self.gradient_coupling[None] * grad_u, zero)
        coupling_grad_dot_grad_u = np.einsum("i...,i...->...", self.gradient_coupling_grad, grad_u)
        dblock = Block(self.diff, 2 * self.diffusivity_grad + self.gradient_coupling[None] * grad_u,
                       self.diffusivity_lap + coupling_grad_dot_grad_u + self.gradient_coupling * lap_u)
        cross = Block(np.zeros_like(self.diff), np.zeros_like(grad_u), zero)
        return CoefficientSet(value=vblock, density=dblock, cross=cross, **self._base)

    def _norm(self, arr):
        g = self.grid
        return float(np.sqrt(np.sum(np.multiply.outer(g.time_weights, g.space_weights) * arr**2)))

    def solve(self, data: SystemData, value_cap: float | None = None) -> SolveResult:
        """Solve; ``value_cap`` only records whether iterates stayed below it."""
        g = self.grid
        u = np.zeros(g.field_shape)
        v = np.zeros(g.field_shape)
        history = []
        self.max_iterate = 0.0
        for k in range(1, self.opts.max_iter + 1):
            lin = LinearizedSolver(self.coefficients(u), self.opts, self.S)
            u_new = lin.step_backward(v, data)
            lin = LinearizedSolver(self.coefficients(u_new), self.opts, self.S)
            v_new = lin.step_forward(u_new, data)
            upd = np.hypot(self._norm(u_new - u), self._norm(v_new - v))
            size = np.hypot(self._norm(u_new), self._norm(v_new))
            history.append(float(upd / size) if size > 0 else 0.0)
            u, v = u_new, v_new
            self.max_iterate = max(self.max_iterate, float(np.max(np.abs(u))), float(np.max(np.abs(v))))
            if upd <= self.opts.tol * size:
                return SolveResult(u, v, k, history)
        raise MaxIterationsExceeded(self.opts.max_iter, history[-1], history)

    def residual(self, value: NDArray, density: NDArray, data: SystemData) -> float:
        """Relative distance of a pair from one more linearised sweep."""
        lin = LinearizedSolver(self.coefficients(value), self.opts, self.S)
        u = lin.step_backward(density, data)
        v = LinearizedSolver(self.coefficients(u), self.opts, self.S).step_forward(u, data)
        num = np.hypot(self._norm(u - value), self._norm(v - density))
        den = np.hypot(self._norm(value), self._norm(density))
        return num / den if den > 0 else num

    def pde_residual(self, value: NDArray, density: NDArray, data: SystemData) -> tuple[float, float]:
        """L2(Q) norms of the nonlinear equation residuals with grid derivatives."""
        g = self.grid
        lap = lambda f: sum(g.dxx(f, i, i) for i in range(g.dim))  # noqa: E731
        grad_u = g.grad(value)
        r1 = g.dt(value) + self.diffusivity * lap(value) - 0.5 * self.gradient_coupling * np.sum(grad_u**2, axis=0) \
            + self.c0 * density - data.value_source
        flux = self.gradient_coupling * density * grad_u
        div = sum(g.dx(flux[i], i) for i in range(g.dim))
        r2 = g.dt(density) - lap(self.diffusivity * density) - div - data.density_source
        return self._norm(r1), self._norm(r2)


def manufacture_nonlinear(value_expr, density_expr, nc: NonlinearCoefficients) -> SystemData:
    """Data for an exact nonlinear pair; Robin data are the exact fluxes."""
    g = nc.grid
    part = nc.partition
    u = parse(value_expr)
    v = parse(density_expr)
    a, k, c = nc.diffusivity, nc.gradient_coupling, nc.coupling
    names = "xy"[: g.dim]
    lap = lambda e: sum((e.diff(n).diff(n) for n in names[1:]), e.diff(names[0]).diff(names[0]))  # noqa: E731
    grad_sq = sum((u.diff(n) * u.diff(n) for n in names[1:]), u.diff(names[0]) * u.diff(names[0]))
    F = u.diff("t") + a * lap(u) - k * grad_sq * 0.5 + c * v
    av = a * v
    div = sum(((k * v * u.diff(n)).diff(n) for n in names[1:]), (k * v * u.diff(names[0])).diff(names[0]))
    G = v.diff("t") - lap(av) - div
    grad_u = np.stack([u.diff(n).sample(g) for n in names])
    grad_av = np.stack([av.diff(n).sample(g) for n in names])
    # value flux: a times the normal derivative of u; density flux: grad(a v) . normal
    return SystemData(g, part, F.sample(g), G.sample(g),
                      part.trace(a.sample(g)) * part.normal_derivative(grad_u),
                      part.normal_derivative(grad_av),
                      u.sample(g)[-1], v.sample(g)[0])


def solve_nonlinear(data: SystemData, nc: NonlinearCoefficients, opts: SolveOptions | None = None) -> SolveResult:
    return NonlinearSolver(nc, opts).solve(data)
