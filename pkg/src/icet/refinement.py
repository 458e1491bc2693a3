"""Sigma-point exclusion of extended distribution axes and projected residuals.

For every reference voxel, two test points are placed on each principal axis
of the point covariance at ``mean +- 2 sqrt(lambda) u``.  An axis whose two
test points both leave the voxel (angular wedge or radial bounds) is treated
as deterministic surface structure and dropped from the measurement.  An axis
with a single point outside is kept.

Only reference-scan statistics enter the test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .voxelgrid import (
    GridConfig, SphericalGrid, VoxelKey, VoxelStats, spherical, voxel_contains,
)

# Eigenvalue floor (m^2) before taking the 2-sigma offset.
MIN_EIGVAL = 1e-4 ** 2
SIGMA_POINT_SCALE = 2.0
SIGMA_JITTER = 1e-12
MAX_SIGMA_COND = 1e12


class SingularMeasurementError(ArithmeticError):
    """Projected measurement covariance is numerically singular."""


@dataclass(frozen=True, eq=False)
class AxisExclusion:
    key: VoxelKey
    retained: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray

    @property
    def k(self) -> int:
        return int(self.retained.size)

    @property
    def L(self) -> np.ndarray:
        return selector(self.retained)


def selector(retained) -> np.ndarray:
    """k x 3 projection keeping the listed eigenvector indices (or a bool mask)."""
    idx = np.asarray(retained)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    return np.eye(3)[idx]


def sigma_points(mean: np.ndarray, eigvecs: np.ndarray, eigvals: np.ndarray) -> np.ndarray:
    """Test points, shape (..., 3 axes, 2 sides, 3)."""
    sig = np.sqrt(np.maximum(eigvals, MIN_EIGVAL))
    offs = SIGMA_POINT_SCALE * sig[..., None, :] * eigvecs        # (..., 3 comp, 3 axes)
    offs = np.swapaxes(offs, -1, -2)                              # (..., axis, comp)
    signs = np.array([1.0, -1.0])[:, None]
    return mean[..., None, None, :] + signs * offs[..., :, None, :]


def sigma_point_masks(grid: SphericalGrid) -> np.ndarray:
    """Retained-axis mask (M, 3) for every voxel of ``grid``."""
    m = len(grid)
    pts = sigma_points(grid.mean, grid.eigvecs, grid.eigvals)     # (M, 3, 2, 3)
    vox = np.repeat(np.arange(m), 6)
    inside = voxel_contains(grid, vox, pts.reshape(-1, 3)).reshape(m, 3, 2)
    return inside.any(axis=2)


def sigma_point_test(stats: VoxelStats, cfg: GridConfig) -> np.ndarray:
    """Retained-axis mask for a single voxel (geometry taken from ``stats``)."""
    pts = sigma_points(stats.mean, stats.eigvecs, stats.eigvals).reshape(-1, 3)
    az0, az1 = stats.azimuth_bounds(cfg)
    el0, el1 = stats.elevation_bounds(cfg)
    az, el, rng = spherical(pts)
    inside = (
        (az >= az0) & (az < az1)
        & (el >= el0) & (el < el1)
        & (rng >= stats.r_lo) & (rng <= stats.r_hi)
    )
    return inside.reshape(3, 2).any(axis=1)


def exclusion(stats: VoxelStats) -> AxisExclusion:
    retained = np.flatnonzero(stats.axis_mask)
    return AxisExclusion(
        key=stats.key, retained=retained,
        eigvecs=stats.eigvecs[:, retained], eigvals=stats.eigvals[retained],
    )


def measurement_covariance(q0: np.ndarray, n0, q: np.ndarray, n) -> np.ndarray:
    """Covariance of the mean difference, assuming independent samples."""
    n0 = np.asarray(n0, dtype=float)
    n = np.asarray(n, dtype=float)
    return q / n[..., None, None] + q0 / n0[..., None, None]


def project_residual(
    ref: VoxelStats,
    new_mean: np.ndarray,
    new_cov: np.ndarray,
    new_count: int,
    excl: AxisExclusion | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Residual ``L U^T (y0 - y)`` and its covariance on the retained axes."""
    excl = excl or exclusion(ref)
    if excl.k == 0:
        raise ValueError(f"voxel {ref.key} has no retained axis")
    proj = excl.L @ ref.eigvecs.T
    dy = proj @ (ref.mean - np.asarray(new_mean, dtype=float))
    sigma = proj @ measurement_covariance(ref.cov, ref.n, np.asarray(new_cov), new_count) @ proj.T
    sigma = 0.5 * (sigma + sigma.T) + SIGMA_JITTER * np.eye(excl.k)
    if np.linalg.cond(sigma) > MAX_SIGMA_COND:
        raise SingularMeasurementError(f"voxel {ref.key}: projected covariance is singular")
    return dy, sigma


class ProjectedGroup(NamedTuple):
    """Voxels sharing one retained-axis pattern, projected to k dimensions."""

    index: np.ndarray      # positions into the caller's voxel list
    H: np.ndarray          # (n, k, 6)
    dy: np.ndarray         # (n, k)
    sigma: np.ndarray      # (n, k, k)


def project_batch(
    eigvecs: np.ndarray,
    mask: np.ndarray,
    residual: np.ndarray,
    sigma: np.ndarray,
    H: np.ndarray,
) -> tuple[list[ProjectedGroup], np.ndarray]:
    """Vectorized projection for many voxels.

    ``residual`` is ``y0 - y`` (n, 3), ``sigma`` the unprojected measurement
    covariance (n, 3, 3) and ``H`` the per-voxel Jacobian (n, 3, 6).  Returns
    one group per retained-axis pattern plus a boolean array of voxels dropped
    for an ill-conditioned covariance.
    """
    n = residual.shape[0]
    ut = np.swapaxes(eigvecs, -1, -2)
    r_rot = np.einsum("nij,nj->ni", ut, residual)
    s_rot = ut @ sigma @ eigvecs
    h_rot = ut @ H
    codes = mask.astype(np.int64) @ np.array([4, 2, 1])
    dropped = np.zeros(n, dtype=bool)
    groups: list[ProjectedGroup] = []
    for code in range(7, 0, -1):
        idx = np.flatnonzero(codes == code)
        if idx.size == 0:
            continue
        axes = np.flatnonzero([(code >> 2) & 1, (code >> 1) & 1, code & 1])
        k = axes.size
        s = s_rot[idx][:, axes][:, :, axes]
        s = 0.5 * (s + np.swapaxes(s, -1, -2)) + SIGMA_JITTER * np.eye(k)
        ev = np.linalg.eigvalsh(s)
        ok = (ev[:, 0] > 0) & (ev[:, -1] <= MAX_SIGMA_COND * np.maximum(ev[:, 0], 0.0))
        dropped[idx[~ok]] = True
        idx = idx[ok]
        if idx.size == 0:
            continue
        groups.append(ProjectedGroup(
            index=idx,
            H=h_rot[idx][:, axes, :],
            dy=r_rot[idx][:, axes],
            sigma=s[ok],
        ))
    return groups, dropped
