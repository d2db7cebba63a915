"""Inverse source recovery and state determination experiments.

The source problem: each source is a known space-time factor times an
unknown spatial factor.  Data are the traces of both fields (and their time
derivatives) on the observed boundary over a time window plus one interior
snapshot inside that window.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import linalg

from .carleman import _sub_weights, h12_squared, norm_H1_observed, norm_H21, norm_star
from .grid import OBSERVED, UNOBSERVED, BoundaryPartition, SpaceTimeGrid
from .operators import CoefficientSet, apply_cross_operator, apply_density_operator, apply_value_operator
from .solver import (LinearizedSolver, NonlinearCoefficients, NonlinearSolver, SolveOptions, SolverError,
                     SystemData)

if TYPE_CHECKING:
    from numpy.typing import NDArray


class PositivityError(ValueError):
    """A known source factor comes too close to zero at the snapshot time."""

    def __init__(self, which: str, node: tuple, value: float, floor: float) -> None:
        super().__init__(f"|{which}| = {abs(value):.3e} < floor {floor:.3e} at node {node} at the snapshot time")
        self.which, self.node, self.value = which, node, value


class ReconstructionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceSpec:
    """Known source factors, snapshot time, observation window and positivity floor."""

    value_factor: NDArray  # (nt, *space)
    density_factor: NDArray
    snapshot_time: float
    window: tuple[float, float]
    floor: float = 1e-8

    def __post_init__(self) -> None:
        lo, hi = self.window
        if not lo < self.snapshot_time < hi:
            raise ValueError(f"snapshot time {self.snapshot_time} must lie inside the window {self.window}")
        if self.floor <= 0:
            raise ValueError("the positivity floor must be positive")

    @classmethod
    def from_expressions(cls, grid: SpaceTimeGrid, value_factor="1", density_factor="1", snapshot_time=None,
                         window=None, floor: float = 1e-8) -> "SourceSpec":
        from .expressions import parse

        t0 = grid.T / 2 if snapshot_time is None else float(snapshot_time)
        win = (grid.T / 4, 3 * grid.T / 4) if window is None else tuple(map(float, window))
        return cls(parse(value_factor).sample(grid), parse(density_factor).sample(grid), t0, win, floor)

    def snapshot_level(self, grid: SpaceTimeGrid) -> int:
        """Nearest time level to the snapshot time (reported as ``snapped_time``)."""
        n = int(round(self.snapshot_time / grid.tau))
        if not 2 <= n <= grid.nt - 3:
            raise ValueError("snapshot time needs two levels on each side for the time difference")
        return n

    def snapped_time(self, grid: SpaceTimeGrid) -> float:
        return float(grid.times[self.snapshot_level(grid)])

    def window_levels(self, grid: SpaceTimeGrid) -> NDArray:
        lv = grid.time_slice(*self.window)
        if len(lv) < 3:
            raise ValueError(f"observation window {self.window} contains fewer than 3 time levels")
        return lv

    def check_floor(self, grid: SpaceTimeGrid) -> None:
        n = self.snapshot_level(grid)
        for name, q in (("value_factor", self.value_factor), ("density_factor", self.density_factor)):
            q = np.asarray(q)
            if q.shape != grid.field_shape:
                raise ValueError(f"{name} has shape {q.shape}, expected {grid.field_shape}")
            level = np.abs(q[n])
            k = int(np.argmin(level))
            if level.flat[k] < self.floor:
                node = np.unravel_index(k, grid.shape)
                raise PositivityError(name, tuple(int(i) for i in node), float(q[n].flat[k]), self.floor)


def _dt4(f: NDArray, n: int, tau: float) -> NDArray:
    return (-f[n + 2] + 8 * f[n + 1] - 8 * f[n - 1] + f[n - 2]) / (12 * tau)


def direct_source_formula(u: NDArray, v: NDArray, c: CoefficientSet, spec: SourceSpec,
                          dt_u: NDArray | None = None, dt_v: NDArray | None = None) -> tuple[NDArray, NDArray]:
    """Source factors read off both equations at the snapshot time.

    Each equation's residual without its source, divided by the known
    factor, at the snapshot level.  Time derivatives default to a fourth-order
    central difference.  ``dt_u``/``dt_v`` may give exact snapshot derivatives.
    """
    g = c.grid
    spec.check_floor(g)
    n = spec.snapshot_level(g)
    u, v = np.asarray(u, float), np.asarray(v, float)
    ut = _dt4(u, n, g.tau) if dt_u is None else np.asarray(dt_u, float)
    vt = _dt4(v, n, g.tau) if dt_v is None else np.asarray(dt_v, float)
    Au = apply_value_operator(u[n], n, c)
    Bv = apply_density_operator(v[n], n, c)
    Ku = apply_cross_operator(u[n], n, c)
    value_src = (ut + Au - c.coupling[n] * v[n]) / spec.value_factor[n]
    density_src = (vt - Bv - Ku) / spec.density_factor[n]
    return value_src, density_src


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass
class ObservationBundle:
    """Observation channels: boundary traces over the window and snapshots.

    Every channel is a plain array; noise is added channel by channel.
    Boundary data (and their time derivatives) are known inputs and are kept
    separately for the data norms.
    """

    channels: dict[str, NDArray]
    value_flux: NDArray | None = None
    density_flux: NDArray | None = None

    def __add__(self, other: "ObservationBundle") -> "ObservationBundle":
        return ObservationBundle({k: v + other.channels[k] for k, v in self.channels.items()},
                                 _opt_add(self.value_flux, other.value_flux),
                                 _opt_add(self.density_flux, other.density_flux))

    def __sub__(self, other: "ObservationBundle") -> "ObservationBundle":
        return self + other.scaled(-1.0)

    def scaled(self, c: float) -> "ObservationBundle":
        return ObservationBundle({k: c * v for k, v in self.channels.items()},
                                 None if self.value_flux is None else c * self.value_flux,
                                 None if self.density_flux is None else c * self.density_flux)

    def with_noise(self, amplitude: float, seed: int) -> "ObservationBundle":
        """Additive uniform noise; per channel, relative to that channel's max modulus."""
        rng = np.random.default_rng(seed)
        out = {}
        for k in sorted(self.channels):
            ch = self.channels[k]
            out[k] = ch + amplitude * float(np.max(np.abs(ch))) * rng.uniform(-1.0, 1.0, ch.shape)
        return ObservationBundle(out, self.value_flux, self.density_flux)

    def save(self, directory, config_hash: str | None = None) -> None:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"channels": {}, "config_hash": config_hash}
        for k in sorted(self.channels):
            arr = self.channels[k]
            np.savetxt(d / f"{k}.csv", arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr[None],
                       delimiter=",", fmt="%.17g", header=f"config_hash={config_hash}" if config_hash else "")
            manifest["channels"][k] = list(arr.shape)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _opt_add(a, b):
    if a is None or b is None:
        return a if b is None else b
    return a + b


class Observer:
    """Extracts observation channels and evaluates the data norms."""

    def __init__(self, grid: SpaceTimeGrid, partition: BoundaryPartition, spec: SourceSpec) -> None:
        self.grid = grid
        self.partition = partition
        self.spec = spec
        self.level = spec.snapshot_level(grid)
        self.window = spec.window_levels(grid)
        obs_w = partition.node_weights(OBSERVED)
        tw = _sub_weights(grid, self.window)[self.window]
        self._trace_w = np.outer(tw, obs_w)
        self._space_w = grid.space_weights
        # norm name -> channels; squared norm = sum of weighted squared channels
        self.norm_terms: dict[str, list[str]] = {}
        for f in ("value", "density"):
            tan = [f"{f}_tangential"] if grid.dim == 2 else []
            tan_t = [f"{f}_tangential_dt"] if grid.dim == 2 else []
            self.norm_terms[f"{f}_snapshot_h2"] = [f"{f}_snapshot", f"{f}_snapshot_grad", f"{f}_snapshot_second"]
            self.norm_terms[f"{f}_observed_h1"] = [f"{f}_trace", f"{f}_trace_dt", *tan]
            self.norm_terms[f"dt_{f}_observed_h1"] = [f"{f}_trace_dt", f"{f}_trace_dt2", *tan_t]

    def observe(self, u: NDArray, v: NDArray, data: SystemData | None = None) -> ObservationBundle:
        g, part, lv, n = self.grid, self.partition, self.window, self.level
        ch = {}
        for name, f in (("value", np.asarray(u, float)), ("density", np.asarray(v, float))):
            ft = g.dt(f)
            ch[f"{name}_trace"] = part.trace(f)[lv]
            ch[f"{name}_trace_dt"] = part.trace(ft)[lv]
            ch[f"{name}_trace_dt2"] = part.trace(g.dt(ft))[lv]
            if g.dim == 2:
                ch[f"{name}_tangential"] = part.tangential_derivative(g.grad(f))[lv]
                ch[f"{name}_tangential_dt"] = part.tangential_derivative(g.grad(ft))[lv]
            snap = f[n]
            ch[f"{name}_snapshot"] = snap
            ch[f"{name}_snapshot_grad"] = np.stack([g.dx(snap, i) for i in range(g.dim)])
            ch[f"{name}_snapshot_second"] = np.stack([g.dxx(snap, i, j) for i in range(g.dim)
                                                      for j in range(i, g.dim)])
        return ObservationBundle(ch, None if data is None else data.value_flux,
                                 None if data is None else data.density_flux)

    def _weight(self, channel: str) -> NDArray:
        return self._space_w if "snapshot" in channel else self._trace_w

    def weighted_vector(self, b: ObservationBundle) -> NDArray:
        """Vector whose squared length is the sum of the squared observation norms."""
        parts = []
        for chans in self.norm_terms.values():
            for c in chans:
                parts.append((np.sqrt(self._weight(c)) * b.channels[c]).ravel())
        return np.concatenate(parts)

    def norms(self, b: ObservationBundle) -> dict[str, float]:
        out = {}
        for name, chans in self.norm_terms.items():
            out[name] = float(np.sqrt(sum(np.sum(self._weight(c) * b.channels[c] ** 2) for c in chans)))
        part, g = self.partition, self.grid
        for key, flux in (("value", b.value_flux), ("density", b.density_flux)):
            if flux is None:
                continue
            ft = g.dt(flux)
            out[f"{key}_flux_star"] = norm_star(flux, part, ft, self.window)
            out[f"dt_{key}_flux_star"] = norm_star(ft, part, g.dt(ft), self.window)
        return out

    def data_norm(self, b: ObservationBundle, with_boundary_data: bool = True) -> float:
        """Sum of the norms in the stability bound's data list."""
        return float(sum(v for k, v in self.norms(b).items() if with_boundary_data or "flux" not in k))


# ---------------------------------------------------------------------------
# forward map
# ---------------------------------------------------------------------------


@dataclass
class SensitivityMap:
    """Weighted linear map ``source factors -> observations`` plus affine offset."""

    matrix: NDArray  # (n_obs, 2 N), weighted
    offset: NDArray  # weighted observation of the fixed data with zero sources
    observer: Observer
    n_nodes: int

    def apply(self, value_src: NDArray, density_src: NDArray) -> NDArray:
        return self.matrix @ np.concatenate([np.ravel(value_src), np.ravel(density_src)]) + self.offset

    def split(self, x: NDArray) -> tuple[NDArray, NDArray]:
        shape = self.observer.grid.shape
        return x[: self.n_nodes].reshape(shape), x[self.n_nodes:].reshape(shape)

    @cached_property
    def extension(self) -> NDArray:
        """Interior source values to all nodes, for both sources.

        Boundary rows of the scheme carry the Robin condition, so source
        values on boundary nodes never reach the observations; the
        identifiable parameters are the interior values, extended outward
        by quadratic extrapolation.
        """
        E = extension_matrix(self.observer.grid)
        return linalg.block_diag(E, E)

    @cached_property
    def reduced(self) -> NDArray:
        return self.matrix @ self.extension


def _extension_1d(n: int) -> NDArray:
    E = np.zeros((n, n - 2))
    E[1:-1] = np.eye(n - 2)
    E[0, :3] = (3.0, -3.0, 1.0)
    E[-1, -3:] = (1.0, -3.0, 3.0)
    return E


def extension_matrix(grid: SpaceTimeGrid) -> NDArray:
    """Tensor-product quadratic extrapolation from interior nodes to the whole grid."""
    E = np.ones((1, 1))
    for n in grid.counts:
        E = np.kron(E, _extension_1d(n))
    return E


def _solve_batch(solver: LinearizedSolver, data: SystemData, start: int) -> tuple[NDArray, NDArray]:
    try:
        res = solver.solve(data)
    except SolverError as exc:
        raise SolverError(f"sensitivity column block starting at {start} failed: {exc}") from exc
    return res.value, res.density


def assemble_forward_map(spec: SourceSpec, c: CoefficientSet, opts: SolveOptions | None = None,
                         fixed: SystemData | None = None, workers: int = 1, chunk: int = 64) -> SensitivityMap:
    """Solve the system once per nodal source basis function, for both sources.

    Columns are solved in blocks along the solver's batch axis; blocks run
    in a thread pool.  ``fixed`` carries the boundary, terminal and initial
    data shared by all experiments (zero by default); its response is the
    affine offset.
    """
    g, part = c.grid, c.partition
    spec.check_floor(g)
    opts = opts or SolveOptions(tol=1e-12)
    obs = Observer(g, part, spec)
    N = g.n_nodes
    value_q = np.asarray(spec.value_factor).reshape(g.nt, N)
    density_q = np.asarray(spec.density_factor).reshape(g.nt, N)
    solver = LinearizedSolver(c, opts)

    def block(start: int) -> NDArray:
        cols = np.arange(start, min(start + chunk, 2 * N))
        k = len(cols)
        value_cols = np.zeros((g.nt, N, k))
        density_cols = np.zeros((g.nt, N, k))
        for j, col in enumerate(cols):
            if col < N:
                value_cols[:, col, j] = value_q[:, col]
            else:
                density_cols[:, col - N, j] = density_q[:, col - N]
        zeros = SystemData.zeros(g, part, (k,))
        data = zeros.replace(value_source=value_cols.reshape(g.field_shape + (k,)),
                             density_source=density_cols.reshape(g.field_shape + (k,)))
        U, V = _solve_batch(solver, data, start)
        return np.stack([obs.weighted_vector(obs.observe(U[..., j], V[..., j])) for j in range(k)], axis=1)

    starts = list(range(0, 2 * N, chunk))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(block, starts))
    else:
        blocks = [block(s) for s in starts]
    matrix = np.concatenate(blocks, axis=1)
    if fixed is None:
        offset = np.zeros(matrix.shape[0])
    else:
        base = fixed.replace(value_source=np.zeros(g.field_shape), density_source=np.zeros(g.field_shape))
        res = solver.solve(base)
        offset = obs.weighted_vector(obs.observe(res.value, res.density))
    return SensitivityMap(matrix, offset, obs, N)


def simulate(value_src: NDArray, density_src: NDArray, spec: SourceSpec, c: CoefficientSet,
             opts: SolveOptions | None = None, fixed: SystemData | None = None) -> tuple[NDArray, NDArray, SystemData]:
    """Solve the forward problem for given source factors."""
    g, part = c.grid, c.partition
    base = fixed if fixed is not None else SystemData.zeros(g, part)
    data = base.replace(value_source=spec.value_factor * np.asarray(value_src)[None],
                        density_source=spec.density_factor * np.asarray(density_src)[None])
    res = LinearizedSolver(c, opts or SolveOptions(tol=1e-12)).solve(data)
    return res.value, res.density, data


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


@dataclass
class Reconstruction:
    value_source_factor: NDArray
    density_source_factor: NDArray
    regularization: float
    residual: float
    solution_norm: float
    condition: float

    def diagnostics(self) -> dict:
        return {"regularization": self.regularization, "residual": self.residual,
                "solution_norm": self.solution_norm, "condition": self.condition}


class TikhonovProblem:
    """``J(f) = |M f + offset - d|^2 + regularization |f|^2_{L2}`` on nodal source values."""

    def __init__(self, fmap: SensitivityMap, observed: NDArray) -> None:
        self.fmap = fmap
        self.A = fmap.reduced
        self.b = np.asarray(observed, float) - fmap.offset
        wx = fmap.observer.grid.space_weights.ravel()
        E = fmap.extension
        self.mass = E.T @ (np.concatenate([wx, wx])[:, None] * E)
        self.normal = self.A.T @ self.A
        self.rhs = self.A.T @ self.b

    def objective(self, x: NDArray, regularization: float) -> float:
        r = self.A @ x - self.b
        return float(r @ r + regularization * x @ self.mass @ x)

    def gradient(self, x: NDArray, regularization: float) -> NDArray:
        return 2 * (self.A.T @ (self.A @ x - self.b)) + 2 * regularization * self.mass @ x

    def solve(self, regularization: float) -> Reconstruction:
        if regularization < 0:
            raise ValueError("regularization weight must be non-negative")
        mat = self.normal + regularization * self.mass
        ev = np.linalg.eigvalsh(mat)
        cond = float(ev[-1] / ev[0]) if ev[0] > 0 else math.inf
        if regularization == 0 and (ev[0] <= 0 or cond > 1e14):
            raise ReconstructionError(f"normal matrix is rank deficient at regularization=0 (condition {cond:.3e}); "
                                      "set a positive regularization weight")
        try:
            x = linalg.cho_solve(linalg.cho_factor(mat), self.rhs)
        except linalg.LinAlgError as exc:
            raise ReconstructionError(f"normal matrix is not positive definite: {exc}") from None
        value_src, density_src = self.fmap.split(self.fmap.extension @ x)
        res = float(np.linalg.norm(self.A @ x - self.b))
        size = float(np.sqrt(x @ self.mass @ x))
        return Reconstruction(value_src, density_src, float(regularization), res, size, cond)

    def gradient_check(self, regularization: float, n_dirs: int = 10, seed: int = 0, step: float = 1e-3) -> float:
        """Worst relative mismatch between the gradient and central differences."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.A.shape[1])
        grad = self.gradient(x, regularization)
        worst = 0.0
        for _ in range(n_dirs):
            d = rng.standard_normal(x.size)
            d /= np.linalg.norm(d)
            up, down = self.objective(x + step * d, regularization), self.objective(x - step * d, regularization)
            fd = (up - down) / (2 * step)
            exact = float(grad @ d)
            worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-300))
        return worst

    def l_curve(self, candidates: Sequence[float] | None = None) -> tuple[float, list[dict]]:
        """Corner of the L-curve (maximum curvature) over a geometric grid of 12 weights."""
        if candidates is None:
            scale = float(np.trace(self.normal) / np.trace(self.mass))
            candidates = scale * np.geomspace(1e-12, 1e-1, 12)
        pts = []
        for b in candidates:
            r = self.solve(float(b))
            pts.append({"regularization": float(b), "residual": r.residual, "solution_norm": r.solution_norm})
        log_res = np.log([max(p["residual"], 1e-300) for p in pts])
        log_norm = np.log([max(p["solution_norm"], 1e-300) for p in pts])
        tb = np.log(np.asarray(candidates, float))
        d1r, d1e = np.gradient(log_res, tb), np.gradient(log_norm, tb)
        d2r, d2e = np.gradient(d1r, tb), np.gradient(d1e, tb)
        curv = (d1r * d2e - d2r * d1e) / np.maximum((d1r**2 + d1e**2) ** 1.5, 1e-300)
        for p, k in zip(pts, curv):
            p["curvature"] = float(k)
        best = int(np.argmax(curv[1:-1])) + 1
        return float(candidates[best]), pts


def reconstruct_tikhonov(observed: ObservationBundle | NDArray, fmap: SensitivityMap,
                         regularization: float | None = None) -> tuple[NDArray, NDArray, dict]:
    """Regularized least-squares source factors; ``regularization=None`` picks the L-curve corner."""
    vec = fmap.observer.weighted_vector(observed) if isinstance(observed, ObservationBundle) else observed
    prob = TikhonovProblem(fmap, vec)
    curve = None
    if regularization is None:
        regularization, curve = prob.l_curve()
    rec = prob.solve(regularization)
    diag = rec.diagnostics()
    if curve is not None:
        diag["l_curve"] = curve
    return rec.value_source_factor, rec.density_source_factor, diag


def l2_norm(f: NDArray, grid: SpaceTimeGrid) -> float:
    return float(np.sqrt(np.sum(grid.space_weights * np.asarray(f) ** 2)))


# ---------------------------------------------------------------------------
# Lipschitz experiments
# ---------------------------------------------------------------------------


@dataclass
class LipschitzReport:
    mode: str
    records: list[dict]
    slope: float | None
    slope_residual: float | None
    constant: float | None
    constant_without_boundary_data: float | None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "records": self.records, "slope": self.slope,
                "slope_residual": self.slope_residual, "constant": self.constant,
                "constant_without_boundary_data": self.constant_without_boundary_data,
                "seed": self.seed, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def loglog_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float | None, float | None]:
    """Slope and RMS residual of a least-squares line through ``(log x, log y)``."""
    pts = [(a, b) for a, b in zip(x, y) if a > 0 and b > 0]
    if len(pts) < 2:
        return None, None
    lx, ly = np.log(np.array(pts)).T
    coef, res, *_ = np.polyfit(lx, ly, 1, full=True)
    rms = float(np.sqrt(res[0] / len(lx))) if len(res) else 0.0
    return float(coef[0]), rms


def smooth_random_field(grid: SpaceTimeGrid, rng: np.random.Generator, modes: int = 4) -> NDArray:
    """Random cosine series with decaying amplitudes on the spatial grid."""
    out = np.zeros(grid.shape)
    axes = np.meshgrid(*grid.axes, indexing="ij")
    for idx in np.ndindex(*(modes,) * grid.dim):
        amp = rng.standard_normal() / (1 + sum(idx)) ** 2
        term = np.ones(grid.shape)
        for k, x, L in zip(idx, axes, grid.extents):
            term = term * np.cos(np.pi * k * x / L)
        out += amp * term
    return out


def random_source_pairs(grid: SpaceTimeGrid, n: int, seed: int, amplitudes: Sequence[float] | None = None
                        ) -> list[tuple[tuple[NDArray, NDArray], tuple[NDArray, NDArray]]]:
    """Pairs with random base sources differing by scaled copies of one random direction."""
    rng = np.random.default_rng(seed)
    amps = np.geomspace(1e-3, 1.0, n) if amplitudes is None else np.asarray(amplitudes, float)
    d1, d2 = smooth_random_field(grid, rng), smooth_random_field(grid, rng)
    pairs = []
    for a in amps:
        b1, b2 = smooth_random_field(grid, rng), smooth_random_field(grid, rng)
        pairs.append(((b1, b2), (b1 + a * d1, b2 + a * d2)))
    return pairs


def lipschitz_experiment(fmap: SensitivityMap, *, pairs=None, truth=None, noise_levels=None,
                         regularization: float = 1e-10, seed: int = 0,
                         fixed: SystemData | None = None) -> LipschitzReport:
    """Empirical Lipschitz constant of the source-to-data inverse map.

    Ensemble mode (``pairs``): the data-side norm of the difference of two
    experiments against ``|df1| + |df2|``.  Noise mode (``truth`` and
    ``noise_levels``): one fixed noise realization scaled by each amplitude,
    reconstruction error against the noise amplitude and data-side norm.
    """
    obs = fmap.observer
    g = obs.grid
    if pairs is not None:
        if len(pairs) < 5:
            raise ValueError("an ensemble needs at least 5 trials")
        records = []
        for (a1, a2), (b1, b2) in pairs:
            df1, df2 = np.asarray(b1) - a1, np.asarray(b2) - a2
            diff = _observe_sources(fmap, df1, df2, fixed_zero=True)
            D = obs.data_norm(diff)
            D0 = obs.data_norm(diff, with_boundary_data=False)
            E = l2_norm(df1, g) + l2_norm(df2, g)
            rec = {"data_norm": D, "data_norm_without_boundary_data": D0, "error": E}
            if D > 0:
                rec["ratio"] = E / D
                rec["ratio_without_boundary_data"] = E / D0 if D0 > 0 else None
            records.append(rec)
        used = [r for r in records if "ratio" in r]
        slope, resid = loglog_fit([r["data_norm"] for r in used], [r["error"] for r in used])
        return LipschitzReport("ensemble", records, slope, resid, _max(r["ratio"] for r in used),
                               _max(r["ratio_without_boundary_data"] for r in used), seed)
    if truth is None or noise_levels is None:
        raise ValueError("give either pairs or truth with noise_levels")
    if len(noise_levels) < 5:
        raise ValueError("a noise schedule needs at least 5 amplitudes")
    value_src, density_src = truth
    clean = _observe_sources(fmap, value_src, density_src, fixed=fixed)
    noise = clean.with_noise(1.0, seed) - clean
    records = []
    for a in noise_levels:
        pert = noise.scaled(float(a))
        noisy = clean + pert
        r1, r2, diag = reconstruct_tikhonov(noisy, fmap, regularization)
        E = l2_norm(r1 - value_src, g) + l2_norm(r2 - density_src, g)
        D = obs.data_norm(ObservationBundle(pert.channels))
        records.append({"amplitude": float(a), "data_norm": D, "error": E,
                        "ratio": E / D if D > 0 else None, "residual": diag["residual"]})
    slope, resid = loglog_fit([r["amplitude"] for r in records], [r["error"] for r in records])
    dslope, _ = loglog_fit([r["data_norm"] for r in records], [r["error"] for r in records])
    errs = [r["error"] for r in records]
    monotone = all(b >= a for a, b in zip(errs, errs[1:]))
    const = _max(r["ratio"] for r in records)
    return LipschitzReport("noise", records, slope, resid, const, const, seed,
                           {"error_vs_data_slope": dslope, "monotone": monotone, "regularization": regularization})


def _max(vals):
    vals = [v for v in vals if v is not None]
    return max(vals) if vals else None


def _observe_sources(fmap: SensitivityMap, value_src, density_src, fixed: SystemData | None = None,
                     fixed_zero: bool = False) -> ObservationBundle:
    """Observation bundle of the sources through the assembled map."""
    vec = fmap.matrix @ np.concatenate([np.ravel(value_src), np.ravel(density_src)])
    if not fixed_zero:
        vec = vec + fmap.offset
    b = _unweighted_bundle(fmap.observer, vec)
    if fixed is not None and not fixed_zero:
        b.value_flux, b.density_flux = fixed.value_flux, fixed.density_flux
    return b


def _unweighted_bundle(obs: Observer, vec: NDArray) -> ObservationBundle:
    """Invert ``weighted_vector`` (first occurrence of each channel)."""
    channels: dict[str, NDArray] = {}
    pos = 0
    shapes = _channel_shapes(obs)
    for chans in obs.norm_terms.values():
        for c in chans:
            shape = shapes[c]
            size = int(np.prod(shape))
            if c not in channels:
                w = np.broadcast_to(np.sqrt(obs._weight(c)), shape)
                with np.errstate(divide="ignore", invalid="ignore"):
                    channels[c] = np.where(w > 0, vec[pos:pos + size].reshape(shape) / np.where(w > 0, w, 1), 0.0)
            pos += size
    return ObservationBundle(channels)


def _channel_shapes(obs: Observer) -> dict[str, tuple]:
    g = obs.grid
    nw, nb = len(obs.window), obs.partition.nb
    d = g.dim
    shapes = {}
    for f in ("value", "density"):
        for c in ("trace", "trace_dt", "trace_dt2", "tangential", "tangential_dt"):
            shapes[f"{f}_{c}"] = (nw, nb)
        shapes[f"{f}_snapshot"] = g.shape
        shapes[f"{f}_snapshot_grad"] = (d, *g.shape)
        shapes[f"{f}_snapshot_second"] = (d * (d + 1) // 2, *g.shape)
    return shapes


# ---------------------------------------------------------------------------
# state determination
# ---------------------------------------------------------------------------


@dataclass
class StateReport:
    mode: str
    margin: float
    lhs: float
    rhs: float
    rhs_terms: dict[str, float]
    ratio: float | None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "margin": self.margin, "lhs": self.lhs, "rhs": self.rhs,
                "rhs_terms": self.rhs_terms, "ratio": self.ratio, **self.extra}


def _l2q(f: NDArray, g: SpaceTimeGrid) -> float:
    return float(np.sqrt(np.sum(np.multiply.outer(g.time_weights, g.space_weights) * np.asarray(f) ** 2)))


def _state_sides(du, dv, dd: SystemData, margin: float, with_boundary_data: bool) -> tuple[float, dict]:
    g, part = dd.grid, dd.partition
    lhs = norm_H21(du, g, margin) + norm_H21(dv, g, margin)
    terms = {
        "value_source": _l2q(dd.value_source, g),
        "density_source": _l2q(dd.density_source, g),
        "value_observed_h1": norm_H1_observed(du, part),
        "density_observed_h1": norm_H1_observed(dv, part),
    }
    if with_boundary_data:
        wu = part.node_weights(UNOBSERVED)
        for key, flux in (("value", dd.value_flux), ("density", dd.density_flux)):
            ft = g.dt(flux)
            terms[f"dt_{key}_flux"] = float(np.sqrt(g.time_weights @ (ft**2 @ wu)))
            terms[f"{key}_flux_h12"] = float(np.sqrt(g.time_weights @ h12_squared(flux, part)))
    return lhs, terms


def state_determination_experiment(first: SystemData, second: SystemData, margin: float, mode: str = "linear", *,
                                   coeffs: CoefficientSet | None = None,
                                   nonlinear: NonlinearCoefficients | None = None,
                                   opts: SolveOptions | None = None, value_cap: float | None = None,
                                   compare_margin: float | None = None, with_boundary_data: bool | None = None
                                   ) -> StateReport:
    """Interior ``H^{2,1}`` size of the solution difference against the data difference.

    Linear mode solves the difference system directly, so the report is
    exactly homogeneous in the data.  Nonlinear mode solves both problems and
    also records the effective bounds of the difference system's
    coefficients and whether the iterates respected ``value_cap``; its data
    side has no boundary-data terms (homogeneous Neumann conditions).
    ``compare_margin`` additionally records the left side over a second
    interior region.
    """
    opts = opts or SolveOptions(tol=1e-12)
    dd = first - second
    g = first.grid
    if mode == "linear":
        if coeffs is None:
            raise ValueError("linear mode needs a coefficient set")
        res = LinearizedSolver(coeffs, opts).solve(dd)
        du, dv = res.value, res.density
        lhs, terms = _state_sides(du, dv, dd, margin, True if with_boundary_data is None else with_boundary_data)
        extra = {}
    elif mode == "nonlinear":
        if nonlinear is None:
            raise ValueError("nonlinear mode needs nonlinear coefficients")
        s1 = NonlinearSolver(nonlinear, opts)
        r1 = s1.solve(first)
        s2 = NonlinearSolver(nonlinear, opts)
        r2 = s2.solve(second)
        du, dv = r1.value - r2.value, r1.density - r2.density
        lhs, terms = _state_sides(du, dv, dd, margin, bool(with_boundary_data))
        extra = {"difference_bounds": _difference_bounds(s1, r1, r2),
                 "iterate_size": _iterate_size(g, r1, r2), "iterations": [r1.iterations, r2.iterations]}
        if value_cap is not None:
            extra["value_cap"] = value_cap
            extra["out_of_hypothesis"] = bool(extra["iterate_size"] > value_cap)
    else:
        raise ValueError("mode must be 'linear' or 'nonlinear'")
    if compare_margin is not None:
        extra["compare_margin"] = float(compare_margin)
        extra["lhs_at_compare_margin"] = norm_H21(du, g, compare_margin) + norm_H21(dv, g, compare_margin)
    rhs = float(sum(terms.values()))
    ratio = lhs / rhs if rhs > 0 else None
    return StateReport(mode, float(margin), float(lhs), rhs, terms, ratio, extra)


def _iterate_size(g: SpaceTimeGrid, *results) -> float:
    """``max_k sup_t (|u_k|_{W^{2,inf}} + |v_k|_{W^{1,inf}})``."""
    out = 0.0
    for r in results:
        u, v = r.value, r.density
        su = np.max(np.abs(u)) + np.max(np.abs(g.grad(u))) + np.max(np.abs(g.hessian(u)))
        sv = np.max(np.abs(v)) + np.max(np.abs(g.grad(v)))
        out = max(out, float(su + sv))
    return out


def _difference_bounds(solver: NonlinearSolver, r1, r2) -> dict:
    g = solver.grid
    k, gk = solver.gradient_coupling, solver.gradient_coupling_grad
    gu1, gu2 = g.grad(r1.value), g.grad(r2.value)
    lap_u1 = sum(g.dxx(r1.value, i, i) for i in range(g.dim))
    kv2 = k * r2.density
    terms = {
        "transport": float(np.max(np.abs(k[None] * (gu1 + gu2)))),
        "reaction": float(np.max(np.abs(np.einsum("i...,i...->...", gk, gu1) + k * lap_u1))),
        "density_diffusion": float(np.max(np.abs(kv2))),
        "density_drift": float(np.max(np.abs(g.grad(kv2)))),
    }
    terms["total"] = float(sum(terms.values()))
    return terms
