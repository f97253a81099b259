"""Time-optimal quadrotor trajectories from piecewise polynomials sized by
optimal-control switching bounds."""

from .flatness import DerivativeStack, FullState, RotorCommand, constraint_jacobian, constraint_map, flat_maps
from .model import PRESETS, PlanarInput, PlanarState, QuadrotorParams, preset
from .oracle import DiProblem, di_min_time, planar_collocation_reference
from .pmp import AdjointConfig, classify_profile, piece_count, shoot_extremal, singular_flow
from .solver import (
    AllAttemptsFailed,
    InfeasibleBoundary,
    PlanProblem,
    Solution,
    SolverOptions,
    Waypoint,
    rest_to_rest,
    robust_aos,
    sample_solution,
    solve_two_state,
    solve_waypoints,
)
from .traj import PiecewiseTrajectory, PolyPiece, piece_from_boundary

__all__ = [
    "AdjointConfig",
    "AllAttemptsFailed",
    "DerivativeStack",
    "DiProblem",
    "FullState",
    "InfeasibleBoundary",
    "PRESETS",
    "PiecewiseTrajectory",
    "PlanProblem",
    "PlanarInput",
    "PlanarState",
    "PolyPiece",
    "QuadrotorParams",
    "RotorCommand",
    "Solution",
    "SolverOptions",
    "Waypoint",
    "classify_profile",
    "constraint_jacobian",
    "constraint_map",
    "di_min_time",
    "flat_maps",
    "piece_count",
    "piece_from_boundary",
    "planar_collocation_reference",
    "preset",
    "rest_to_rest",
    "robust_aos",
    "sample_solution",
    "shoot_extremal",
    "singular_flow",
    "solve_two_state",
    "solve_waypoints",
]

__version__ = "0.1.0"
