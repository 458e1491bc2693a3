"""Iterative weighted-least-squares scan registration.

One iteration transforms the new scan with the current estimate, assigns
points to the reference voxels, projects each voxel's mean difference onto
its retained eigen-axes and accumulates the 6x6 normal equations block by
block.  The normal matrix is screened by condition number; eigen-directions
removed by the screen are excluded from the step and reported as
do-not-use (DNU) states.

After convergence, voxels whose mean residual exceeds ``t_mod`` are treated
as moving objects, removed, and the loop runs once more from the converged
estimate.  ``refinement_enabled=False`` keeps every eigen-axis of every
voxel, which gives the NDT-style baseline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import STATE_NAMES, StateVector, rotation_derivatives, rotation_from_state
from .pointcloud_io import PointCloud
from .refinement import ProjectedGroup, measurement_covariance, project_batch, sigma_point_masks
from .voxelgrid import (
    EmptyGridError, GridConfig, SphericalGrid, assign_points, build_grid, new_scan_stats,
)

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """Base class for registration failures."""


class UnregistrableScanError(RegistrationError):
    """No voxel produced a usable measurement."""


class FullyUnobservableError(RegistrationError):
    """The condition screen removed every solution direction."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 30
    convergence_tol: float = 1e-8
    t_cond: float = 5e4
    t_mod: float = 0.05
    refinement_enabled: bool = True
    initial_guess: StateVector = field(default_factory=StateVector)
    dnu_component_ratio: float = 0.5

    def __post_init__(self) -> None:
        if not self.t_cond > 1:
            raise ValueError("t_cond must exceed 1")
        if not self.t_mod > 0:
            raise ValueError("t_mod must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True, eq=False)
class ConditionScreen:
    basis: np.ndarray               # (6, k) retained eigenvectors of A
    eigvals: np.ndarray             # (k,) matching eigenvalues, ascending
    removed: list[np.ndarray]       # removed eigenvectors, smallest eigenvalue first
    removed_eigvals: list[float]
    dnu_flags: np.ndarray           # (6,) bool

    def covariance(self) -> np.ndarray:
        """Inverse of A on the retained subspace, zero elsewhere."""
        return (self.basis / self.eigvals) @ self.basis.T


@dataclass(frozen=True, eq=False)
class IterationRecord:
    """Operands of one WLS iteration, kept for verification."""

    iteration: int
    estimate: StateVector
    voxels: np.ndarray
    H: list[np.ndarray]
    dy: list[np.ndarray]
    sigma: list[np.ndarray]
    A: np.ndarray
    b: np.ndarray


@dataclass(frozen=True, eq=False)
class SolutionReport:
    estimate: StateVector
    P: np.ndarray
    dnu_flags: np.ndarray
    removed_eigvecs: list[np.ndarray]
    iterations_used: int
    voxels_used: int
    voxels_rejected_moving: int
    voxels_excluded_axes: int
    converged: bool
    voxels_used_before_rejection: int = 0
    voxels_dropped_singular: int = 0
    grid_voxels: int = 0

    @property
    def dnu_states(self) -> list[str]:
        return [n for n, f in zip(STATE_NAMES, self.dnu_flags) if f]

    def to_dict(self) -> dict:
        sig = predicted_sigmas(self)
        return {
            "estimate": self.estimate.to_dict(),
            "predicted_sigmas": {n: _num(v) for n, v in zip(STATE_NAMES, sig)},
            "dnu_flags": {n: bool(f) for n, f in zip(STATE_NAMES, self.dnu_flags)},
            "dnu_states": self.dnu_states,
            "P": [[_num(v) for v in row] for row in self.P],
            "removed_eigvecs": [[float(v) for v in vec] for vec in self.removed_eigvecs],
            "iterations_used": self.iterations_used,
            "voxels_used": self.voxels_used,
            "voxels_used_before_rejection": self.voxels_used_before_rejection,
            "voxels_rejected_moving": self.voxels_rejected_moving,
            "voxels_excluded_axes": self.voxels_excluded_axes,
            "voxels_dropped_singular": self.voxels_dropped_singular,
            "grid_voxels": self.grid_voxels,
            "converged": self.converged,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _num(v: float) -> float | None:
    v = float(v)
    return None if math.isnan(v) else v


def predicted_sigmas(report: SolutionReport) -> np.ndarray:
    """Square roots of diag(P); NaN where the state is flagged DNU."""
    d = np.diag(report.P).copy()
    d[report.dnu_flags] = np.nan
    return np.sqrt(np.maximum(d, 0.0), where=~np.isnan(d), out=np.full(6, np.nan))


def voxel_jacobians(y_p: np.ndarray, s: StateVector) -> np.ndarray:
    """Per-voxel 3x6 Jacobians of the transformed mean w.r.t. the state.

    ``y_p`` holds the new-scan voxel means in the new scan's own frame.
    """
    y_p = np.asarray(y_p, dtype=float).reshape(-1, 3)
    dr = rotation_derivatives(s)                      # (3 angles, 3, 3)
    H = np.zeros((y_p.shape[0], 3, 6))
    H[:, 0, 0] = H[:, 1, 1] = H[:, 2, 2] = -1.0
    H[:, :, 3:] = np.einsum("aij,nj->nia", dr, y_p)
    return H


def accumulate_normal_equations(
    measurements: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray]:
    """Sum ``H^T S^-1 H`` and ``H^T S^-1 dy`` over per-voxel measurements.

    ``measurements`` is a sequence of ``(H (k, 6), dy (k,), S (k, k))`` in the
    order they should be added (ascending voxel key).
    """
    if len(measurements) == 0:
        raise UnregistrableScanError("no voxel measurements to accumulate")
    A = np.zeros((6, 6))
    b = np.zeros(6)
    for H, dy, S in measurements:
        H = np.atleast_2d(H)
        w_h = np.linalg.solve(S, H)
        A += H.T @ w_h
        b += w_h.T @ dy
    return 0.5 * (A + A.T), b


def accumulate_groups(groups: Sequence[ProjectedGroup], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`accumulate_normal_equations`; contributions are summed in
    ascending voxel order so the result does not depend on the grouping."""
    if not groups:
        raise UnregistrableScanError("no voxel measurements to accumulate")
    a_blocks = np.zeros((n, 6, 6))
    b_blocks = np.zeros((n, 6))
    used = np.zeros(n, dtype=bool)
    for g in groups:
        w_h = np.linalg.solve(g.sigma, g.H)                       # (m, k, 6)
        a_blocks[g.index] = np.swapaxes(g.H, -1, -2) @ w_h
        b_blocks[g.index] = np.einsum("mki,mk->mi", w_h, g.dy)
        used[g.index] = True
    A = a_blocks[used].sum(axis=0)
    b = b_blocks[used].sum(axis=0)
    return 0.5 * (A + A.T), b


def dnu_from_vectors(removed: Sequence[np.ndarray], ratio: float = 0.5) -> np.ndarray:
    """Flag each state carrying at least ``ratio`` of a removed vector's peak component."""
    flags = np.zeros(6, dtype=bool)
    for v in removed:
        mag = np.abs(v)
        flags |= mag >= ratio * mag.max()
    return flags


def condition_screen(A: np.ndarray, t_cond: float = 5e4, ratio: float = 0.5) -> ConditionScreen:
    """Drop eigen-directions of ``A`` (smallest first) until cond(A) <= t_cond."""
    A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
    vals, vecs = np.linalg.eigh(A)
    keep = list(range(6))
    removed: list[np.ndarray] = []
    removed_vals: list[float] = []
    while keep:
        lo, hi = vals[keep[0]], vals[keep[-1]]
        if lo > 0 and hi <= t_cond * lo:
            break
        removed.append(vecs[:, keep[0]].copy())
        removed_vals.append(float(vals[keep[0]]))
        keep.pop(0)
    if not keep:
        raise FullyUnobservableError("every solution direction failed the condition test")
    return ConditionScreen(
        basis=vecs[:, keep], eigvals=vals[keep], removed=removed,
        removed_eigvals=removed_vals, dnu_flags=dnu_from_vectors(removed, ratio),
    )


def solve_step(screen: ConditionScreen, b: np.ndarray) -> np.ndarray:
    """State correction restricted to the retained eigen-directions."""
    return screen.basis @ ((screen.basis.T @ np.asarray(b, dtype=float)) / screen.eigvals)


@dataclass(frozen=True, eq=False)
class _Linearization:
    A: np.ndarray
    b: np.ndarray
    voxels: np.ndarray
    residual_norm: np.ndarray
    groups: list[ProjectedGroup]
    n_used: int
    n_dropped: int


class _Problem:
    def __init__(self, grid: SphericalGrid, new: np.ndarray):
        self.grid = grid
        self.new = new
        self.measurable = grid.axis_mask.any(axis=1)

    def linearize(self, x: StateVector, active: np.ndarray) -> _Linearization:
        grid = self.grid
        R = rotation_from_state(x)
        t = x.translation
        q = self.new @ R.T - t
        labels = assign_points(q, grid)
        ok = labels >= 0
        ok[ok] = active[labels[ok]] & self.measurable[labels[ok]]
        labels = np.where(ok, labels, -1)
        stats = new_scan_stats(q, labels, grid)
        vox = stats.voxel
        if vox.size == 0:
            raise UnregistrableScanError("no voxel holds enough points from both scans")
        y0 = grid.mean[vox]
        resid = y0 - stats.mean
        y_p = (stats.mean + t) @ R
        H = voxel_jacobians(y_p, x)
        sigma = measurement_covariance(grid.cov[vox], grid.count[vox], stats.cov, stats.count)
        groups, dropped = project_batch(grid.eigvecs[vox], grid.axis_mask[vox], resid, sigma, H)
        A, b = accumulate_groups(groups, vox.size)
        return _Linearization(
            A=A, b=b, voxels=vox, residual_norm=np.linalg.norm(resid, axis=1),
            groups=groups, n_used=int(vox.size - dropped.sum()), n_dropped=int(dropped.sum()),
        )


def _record(it: int, x: StateVector, lin: _Linearization) -> IterationRecord:
    n = lin.voxels.size
    H: list = [None] * n
    dy: list = [None] * n
    sg: list = [None] * n
    for g in lin.groups:
        for j, pos in enumerate(g.index):
            H[pos], dy[pos], sg[pos] = g.H[j], g.dy[j], g.sigma[j]
    keep = [i for i in range(n) if H[i] is not None]
    return IterationRecord(
        iteration=it, estimate=x, voxels=lin.voxels[keep],
        H=[H[i] for i in keep], dy=[dy[i] for i in keep], sigma=[sg[i] for i in keep],
        A=lin.A.copy(), b=lin.b.copy(),
    )


def _iterate(problem, x, active, cfg, start, callback):
    it = start
    for _ in range(cfg.max_iterations):
        it += 1
        lin = problem.linearize(x, active)
        if callback is not None:
            callback(_record(it, x, lin))
        screen = condition_screen(lin.A, cfg.t_cond, cfg.dnu_component_ratio)
        dx = solve_step(screen, lin.b)
        x = StateVector.from_array(x.as_array() + dx)
        logger.debug("iteration %d |dx|=%.3g voxels=%d", it, np.abs(dx).max(), lin.n_used)
        if np.abs(dx).max() < cfg.convergence_tol:
            return x, it, True
    return x, it, False


def prepare_grid(reference: PointCloud | np.ndarray, grid_cfg: GridConfig, refinement: bool) -> SphericalGrid:
    """Reference grid with sigma-point masks applied (all axes kept when
    ``refinement`` is off)."""
    grid = build_grid(reference, grid_cfg)
    if refinement:
        grid = grid.with_axis_mask(sigma_point_masks(grid))
    return grid


def register(
    reference: PointCloud | np.ndarray,
    new: PointCloud | np.ndarray,
    grid_cfg: GridConfig | None = None,
    solver_cfg: SolverConfig | None = None,
    callback: Callable[[IterationRecord], None] | None = None,
    grid: SphericalGrid | None = None,
) -> SolutionReport:
    """Estimate the state mapping ``new`` onto ``reference``.

    A prepared ``grid`` may be passed to skip voxelizing the reference again.
    """
    grid_cfg = grid_cfg or GridConfig()
    cfg = solver_cfg or SolverConfig()
    try:
        if grid is None:
            grid = prepare_grid(reference, grid_cfg, cfg.refinement_enabled)
    except EmptyGridError as exc:
        raise UnregistrableScanError(str(exc)) from exc
    new_pts = new.points if isinstance(new, PointCloud) else np.asarray(new, float).reshape(-1, 3)
    problem = _Problem(grid, new_pts)
    active = np.ones(len(grid), dtype=bool)

    x, iters, converged = _iterate(problem, cfg.initial_guess, active, cfg, 0, callback)
    lin = problem.linearize(x, active)
    used_before = lin.n_used
    moving = lin.voxels[lin.residual_norm > cfg.t_mod]
    if moving.size:
        logger.info("rejecting %d voxel(s) as moving objects", moving.size)
        active[moving] = False
        x, iters, converged = _iterate(problem, x, active, cfg, iters, callback)
        lin = problem.linearize(x, active)

    screen = condition_screen(lin.A, cfg.t_cond, cfg.dnu_component_ratio)
    P = screen.covariance()
    P = 0.5 * (P + P.T)
    P[screen.dnu_flags, :] = np.nan
    P[:, screen.dnu_flags] = np.nan
    return SolutionReport(
        estimate=x,
        P=P,
        dnu_flags=screen.dnu_flags,
        removed_eigvecs=screen.removed,
        iterations_used=iters,
        voxels_used=lin.n_used,
        voxels_rejected_moving=int(moving.size),
        voxels_excluded_axes=int((~grid.axis_mask).any(axis=1).sum()),
        converged=converged,
        voxels_used_before_rejection=used_before,
        voxels_dropped_singular=lin.n_dropped,
        grid_voxels=len(grid),
    )
