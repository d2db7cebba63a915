"""Finite-difference laboratory for coupled forward/backward parabolic systems.

Modules: ``grid`` (space-time grids and boundary partitions), ``weights``
(exponential weight functions), ``operators`` (coefficients, stencils and the
conjugated operator), ``solver`` (linearised and nonlinear solvers),
``carleman`` (both sides of the weighted estimates), ``inverse`` (source
recovery and state determination) and ``cli`` (experiment runner).
"""

from __future__ import annotations

from .carleman import (EstimateReport, Sides, SystemFields, first_power_estimate_sides, norm_H12_boundary,
                       norm_H21, norm_star, scalar_estimate_sides, scaled_estimate_sides, sweep_s,
                       system_estimate_sides, time_derivative_sides, trace_estimate_sides)
from .expressions import Expression, parse
from .grid import BoundaryPartition, ScalarField, SpaceTimeGrid, build_grid, partition_boundary
from .inverse import (LipschitzReport, ObservationBundle, SourceSpec, assemble_forward_map, direct_source_formula,
                      lipschitz_experiment, reconstruct_tikhonov, state_determination_experiment)
from .operators import CoefficientSet, conjugate_operator, split_conjugate
from .solver import (NonlinearCoefficients, SolveOptions, SystemData, manufacture, manufacture_nonlinear,
                     solve_linearized, solve_nonlinear, step_backward_u, step_forward_v)
from .weights import CarlemanWeights, check_weight_bounds, mirrored_weights_at, time_factor, weights_at

__version__ = "0.1.0"

__all__ = [
    "BoundaryPartition", "CarlemanWeights", "CoefficientSet", "EstimateReport", "Expression", "LipschitzReport",
    "NonlinearCoefficients", "ObservationBundle", "ScalarField", "Sides", "SolveOptions", "SourceSpec",
    "SpaceTimeGrid", "SystemData", "SystemFields", "assemble_forward_map", "build_grid", "check_weight_bounds",
    "conjugate_operator", "direct_source_formula", "first_power_estimate_sides", "lipschitz_experiment",
    "manufacture", "manufacture_nonlinear", "mirrored_weights_at", "norm_H12_boundary", "norm_H21", "norm_star",
    "parse", "partition_boundary", "reconstruct_tikhonov", "scalar_estimate_sides", "scaled_estimate_sides",
    "solve_linearized", "solve_nonlinear", "split_conjugate", "state_determination_experiment",
    "step_backward_u", "step_forward_v", "sweep_s", "system_estimate_sides", "time_derivative_sides",
    "time_factor", "trace_estimate_sides", "weights_at",
]
