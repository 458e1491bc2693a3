"""Voxel-based LIDAR scan matching with sigma-point exclusion of extended
surface directions and condition-number detection of unobservable states."""

from __future__ import annotations

__version__ = "0.1.0"

from .geometry import STATE_NAMES, StateVector, rotation_from_state, state_from_matrix, state_to_matrix
from .pointcloud_io import PointCloud, ScanFormatError, load_scan, save_scan, write_table
from .scenes import DEFAULT_TRUTH, SceneSpec, sample_scene, scene_pair
from .solver import (
    FullyUnobservableError, RegistrationError, SolutionReport, SolverConfig,
    UnregistrableScanError, predicted_sigmas, register,
)
from .voxelgrid import GridConfig, SphericalGrid, build_grid

__all__ = [
    "DEFAULT_TRUTH", "FullyUnobservableError", "GridConfig", "PointCloud", "RegistrationError",
    "STATE_NAMES", "ScanFormatError", "SceneSpec", "SolutionReport", "SolverConfig",
    "SphericalGrid", "StateVector", "UnregistrableScanError", "build_grid", "load_scan",
    "predicted_sigmas", "register", "rotation_from_state", "sample_scene", "save_scan",
    "scene_pair", "state_from_matrix", "state_to_matrix", "write_table",
]
