"""Spherical voxel grid with one adaptive radial cell per look direction.

Each (azimuth, elevation) column of the grid holds at most one voxel.  Its
radial extent hugs the nearest surface seen in that column: reference points
are sorted by range and split wherever consecutive ranges jump by more than
``radial_gap_threshold``; the nearest run holding at least ``min_points``
points defines ``[r_lo, r_hi]`` (padded by ``radial_padding``).  Background
returns shadowed by a nearer surface therefore fall outside the voxel.

Angular intervals are half-open, ``[lo, hi)``, so every direction belongs to
exactly one column.  Covariances use the population (1/N) normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

from .pointcloud_io import PointCloud


class EmptyGridError(ValueError):
    """No column of the reference scan met the minimum point count."""


@dataclass(frozen=True)
class GridConfig:
    angular_resolution: float = 4.0
    elevation_span: tuple[float, float] = (-25.0, 25.0)
    min_points: int = 50
    radial_gap_threshold: float = 1.5
    min_range: float = 0.5
    max_range: float = 200.0
    radial_padding: float = 0.01

    def __post_init__(self) -> None:
        if not self.angular_resolution > 0:
            raise ValueError("angular_resolution must be positive")
        lo, hi = self.elevation_span
        if not -90.0 <= lo < hi <= 90.0:
            raise ValueError(f"bad elevation span {self.elevation_span}")
        if self.min_points < 2:
            raise ValueError("min_points must be at least 2")
        if not 0 <= self.min_range < self.max_range:
            raise ValueError("need 0 <= min_range < max_range")
        object.__setattr__(self, "elevation_span", (float(lo), float(hi)))

    @property
    def n_azimuth(self) -> int:
        return max(1, int(round(360.0 / self.angular_resolution)))

    @property
    def n_elevation(self) -> int:
        lo, hi = self.elevation_span
        return max(1, int(round((hi - lo) / self.angular_resolution)))

    @property
    def azimuth_resolution(self) -> float:
        """Realized azimuth width of a column in degrees."""
        return 360.0 / self.n_azimuth

    @property
    def elevation_resolution(self) -> float:
        lo, hi = self.elevation_span
        return (hi - lo) / self.n_elevation

    @property
    def n_columns(self) -> int:
        return self.n_azimuth * self.n_elevation


class VoxelKey(NamedTuple):
    az: int
    el: int


@dataclass(frozen=True, eq=False)
class VoxelStats:
    key: VoxelKey
    r_lo: float
    r_hi: float
    n: int
    mean: np.ndarray
    cov: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    axis_mask: np.ndarray

    def azimuth_bounds(self, cfg: GridConfig) -> tuple[float, float]:
        w = cfg.azimuth_resolution
        return self.key.az * w, (self.key.az + 1) * w

    def elevation_bounds(self, cfg: GridConfig) -> tuple[float, float]:
        w = cfg.elevation_resolution
        lo = cfg.elevation_span[0]
        return lo + self.key.el * w, lo + (self.key.el + 1) * w


def spherical(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Azimuth in [0, 360) deg, elevation in [-90, 90] deg and range in m."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    horiz = np.hypot(pts[:, 0], pts[:, 1])
    az = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
    az = np.where(az < 0.0, az + 360.0, az)
    az = np.where(az >= 360.0, az - 360.0, az)
    el = np.degrees(np.arctan2(pts[:, 2], horiz))
    rng = np.sqrt(horiz * horiz + pts[:, 2] * pts[:, 2])
    return az, el, rng


def angular_indices(
    points: np.ndarray, cfg: GridConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point (azimuth index, elevation index, range); elevation index is -1
    outside the elevation span."""
    az, el, rng = spherical(points)
    az_idx = np.floor(az / cfg.azimuth_resolution).astype(np.int64)
    az_idx = np.clip(az_idx, 0, cfg.n_azimuth - 1)
    el_idx = np.floor((el - cfg.elevation_span[0]) / cfg.elevation_resolution).astype(np.int64)
    el_idx = np.where((el_idx >= 0) & (el_idx < cfg.n_elevation), el_idx, -1)
    return az_idx, el_idx, rng


def column_index(points: np.ndarray, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Flat column id ``el * n_azimuth + az`` (-1 outside the span) and range."""
    az_idx, el_idx, rng = angular_indices(points, cfg)
    col = np.where(el_idx >= 0, el_idx * cfg.n_azimuth + az_idx, -1)
    return col, rng


def group_statistics(
    points: np.ndarray, labels: np.ndarray, n_groups: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts, means and 1/N covariances per label (labels < 0 ignored).

    Two-pass (mean first, then centered products) to avoid cancellation for
    far-away clusters.  Groups with no points get zero mean and covariance.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    sel = labels >= 0
    lab = labels[sel]
    p = pts[sel]
    count = np.bincount(lab, minlength=n_groups).astype(np.int64)
    safe = np.maximum(count, 1)
    mean = np.empty((n_groups, 3))
    for k in range(3):
        mean[:, k] = np.bincount(lab, weights=p[:, k], minlength=n_groups) / safe
    d = p - mean[lab]
    cov = np.empty((n_groups, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(lab, weights=d[:, a] * d[:, b], minlength=n_groups) / safe
            cov[:, a, b] = s
            cov[:, b, a] = s
    return count, mean, cov


def sorted_eigh(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending, clamped at 0) and eigenvectors (as columns) of a
    stack of symmetric 3x3 matrices, with the largest-magnitude component of
    every eigenvector made positive."""
    cov = np.asarray(cov, dtype=float)
    vals, vecs = np.linalg.eigh(cov)
    vals = vals[..., ::-1]
    vecs = vecs[..., ::-1]
    vals = np.maximum(vals, 0.0)
    idx = np.argmax(np.abs(vecs), axis=-2)
    lead = np.take_along_axis(vecs, idx[..., None, :], axis=-2)
    vecs = vecs * np.where(lead < 0.0, -1.0, 1.0)
    return vals, vecs


@dataclass(frozen=True, eq=False)
class SphericalGrid:
    """Voxels built from a reference scan, stored as parallel arrays in
    ascending column order (elevation-major, then azimuth)."""

    cfg: GridConfig
    columns: np.ndarray
    r_lo: np.ndarray
    r_hi: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    axis_mask: np.ndarray
    column_lookup: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.columns.shape[0]

    @property
    def az_index(self) -> np.ndarray:
        return self.columns % self.cfg.n_azimuth

    @property
    def el_index(self) -> np.ndarray:
        return self.columns // self.cfg.n_azimuth

    def key(self, v: int) -> VoxelKey:
        c = int(self.columns[v])
        return VoxelKey(c % self.cfg.n_azimuth, c // self.cfg.n_azimuth)

    def keys(self) -> list[VoxelKey]:
        return [self.key(v) for v in range(len(self))]

    def index_of(self, key: VoxelKey) -> int:
        if not (0 <= key.az < self.cfg.n_azimuth and 0 <= key.el < self.cfg.n_elevation):
            return -1
        return int(self.column_lookup[key.el * self.cfg.n_azimuth + key.az])

    def voxel(self, v: int) -> VoxelStats:
        return VoxelStats(
            key=self.key(v),
            r_lo=float(self.r_lo[v]),
            r_hi=float(self.r_hi[v]),
            n=int(self.count[v]),
            mean=self.mean[v].copy(),
            cov=self.cov[v].copy(),
            eigvecs=self.eigvecs[v].copy(),
            eigvals=self.eigvals[v].copy(),
            axis_mask=self.axis_mask[v].copy(),
        )

    def __getitem__(self, key: VoxelKey) -> VoxelStats:
        v = self.index_of(VoxelKey(*key))
        if v < 0:
            raise KeyError(key)
        return self.voxel(v)

    def __contains__(self, key: object) -> bool:
        try:
            return self.index_of(VoxelKey(*key)) >= 0  # type: ignore[misc]
        except TypeError:
            return False

    def __iter__(self) -> Iterator[VoxelStats]:
        return (self.voxel(v) for v in range(len(self)))

    def with_axis_mask(self, mask: np.ndarray) -> SphericalGrid:
        mask = np.asarray(mask, dtype=bool).reshape(len(self), 3)
        return replace(self, axis_mask=mask)

    def subset(self, keep: np.ndarray) -> SphericalGrid:
        """Grid restricted to the voxels where ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        cols = self.columns[keep]
        lookup = np.full(self.cfg.n_columns, -1, dtype=np.int64)
        lookup[cols] = np.arange(cols.shape[0])
        return SphericalGrid(
            cfg=self.cfg, columns=cols, r_lo=self.r_lo[keep], r_hi=self.r_hi[keep],
            count=self.count[keep], mean=self.mean[keep], cov=self.cov[keep],
            eigvals=self.eigvals[keep], eigvecs=self.eigvecs[keep],
            axis_mask=self.axis_mask[keep], column_lookup=lookup,
        )

    def to_rows(self) -> list[dict[str, object]]:
        """One record per voxel for CSV debug dumps."""
        rows = []
        for v in range(len(self)):
            k = self.key(v)
            c = self.cov[v]
            rows.append({
                "az": k.az, "el": k.el,
                "r_lo": float(self.r_lo[v]), "r_hi": float(self.r_hi[v]),
                "n": int(self.count[v]),
                "mean_x": float(self.mean[v, 0]), "mean_y": float(self.mean[v, 1]),
                "mean_z": float(self.mean[v, 2]),
                "q_xx": float(c[0, 0]), "q_xy": float(c[0, 1]), "q_xz": float(c[0, 2]),
                "q_yy": float(c[1, 1]), "q_yz": float(c[1, 2]), "q_zz": float(c[2, 2]),
            })
        return rows


def _points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


def radial_bins(
    col: np.ndarray, rng: np.ndarray, cfg: GridConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columns that receive a voxel and their unpadded ``(r_min, r_max)``.

    ``col``/``rng`` must already exclude points outside the span or range limits.
    """
    if col.size == 0:
        empty = np.empty(0)
        return np.empty(0, dtype=np.int64), empty, empty
    order = np.lexsort((rng, col))
    c = col[order]
    r = rng[order]
    brk = np.ones(c.shape[0], dtype=bool)
    brk[1:] = (c[1:] != c[:-1]) | ((r[1:] - r[:-1]) > cfg.radial_gap_threshold)
    starts = np.flatnonzero(brk)
    ends = np.append(starts[1:], c.shape[0])
    lengths = ends - starts
    ok = lengths >= cfg.min_points
    starts, ends = starts[ok], ends[ok]
    run_col = c[starts]
    # runs are sorted by (column, range): the first one per column is nearest
    cols, first = np.unique(run_col, return_index=True)
    return cols, r[starts[first]], r[ends[first] - 1]


def build_grid(reference: PointCloud | np.ndarray, cfg: GridConfig | None = None) -> SphericalGrid:
    """Voxelize the reference scan and compute per-voxel statistics."""
    cfg = cfg or GridConfig()
    pts = _points(reference)
    if pts.shape[0] == 0:
        raise EmptyGridError("reference scan is empty")
    col, rng = column_index(pts, cfg)
    usable = (col >= 0) & (rng >= cfg.min_range) & (rng <= cfg.max_range)
    cols, rmin, rmax = radial_bins(col[usable], rng[usable], cfg)
    if cols.size == 0:
        raise EmptyGridError("no voxel column reached the minimum point count")
    lookup = np.full(cfg.n_columns, -1, dtype=np.int64)
    lookup[cols] = np.arange(cols.size)
    m = cols.size
    grid = SphericalGrid(
        cfg=cfg, columns=cols,
        r_lo=rmin - cfg.radial_padding, r_hi=rmax + cfg.radial_padding,
        count=np.zeros(m, dtype=np.int64), mean=np.zeros((m, 3)), cov=np.zeros((m, 3, 3)),
        eigvals=np.zeros((m, 3)), eigvecs=np.tile(np.eye(3), (m, 1, 1)),
        axis_mask=np.ones((m, 3), dtype=bool), column_lookup=lookup,
    )
    labels = assign_points(pts, grid)
    count, mean, cov = group_statistics(pts, labels, m)
    vals, vecs = sorted_eigh(cov)
    grid = replace(grid, count=count, mean=mean, cov=cov, eigvals=vals, eigvecs=vecs)
    # the padded bounds can only add points; a run below min_points cannot appear
    return grid.subset(count >= cfg.min_points)


def assign_points(cloud: PointCloud | np.ndarray, grid: SphericalGrid) -> np.ndarray:
    """Voxel index of every point, or -1 when it lies in no voxel."""
    pts = _points(cloud)
    col, rng = column_index(pts, grid.cfg)
    v = np.where(col >= 0, grid.column_lookup[np.maximum(col, 0)], -1)
    inside = v >= 0
    vi = np.maximum(v, 0)
    inside &= (rng >= grid.r_lo[vi]) & (rng <= grid.r_hi[vi])
    return np.where(inside, v, -1)


def assignment_lists(labels: np.ndarray, n_voxels: int) -> list[np.ndarray]:
    """Per-voxel point index arrays (ascending) from an assignment vector."""
    order = np.argsort(labels, kind="stable")
    lab = labels[order]
    bounds = np.searchsorted(lab, np.arange(n_voxels + 1))
    return [order[bounds[v]:bounds[v + 1]] for v in range(n_voxels)]


@dataclass(frozen=True, eq=False)
class ScanStats:
    """New-scan statistics for the voxels that met ``min_points``."""

    voxel: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def __len__(self) -> int:
        return self.voxel.shape[0]


def new_scan_stats(
    cloud: PointCloud | np.ndarray, labels: np.ndarray, grid: SphericalGrid
) -> ScanStats:
    """Statistics of the (already transformed) new scan inside each voxel."""
    pts = _points(cloud)
    count, mean, cov = group_statistics(pts, labels, len(grid))
    keep = np.flatnonzero(count >= grid.cfg.min_points)
    return ScanStats(voxel=keep, count=count[keep], mean=mean[keep], cov=cov[keep])


def voxel_contains(grid: SphericalGrid, v: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Whether ``points[i]`` lies inside voxel ``v[i]`` (exact spherical wedge)."""
    az_idx, el_idx, rng = angular_indices(points, grid.cfg)
    col = grid.columns[v]
    return (
        (el_idx >= 0)
        & (el_idx * grid.cfg.n_azimuth + az_idx == col)
        & (rng >= grid.r_lo[v])
        & (rng <= grid.r_hi[v])
    )


def realized_resolution_error(cfg: GridConfig) -> float:
    """Relative difference between requested and realized azimuth width."""
    return abs(cfg.azimuth_resolution - cfg.angular_resolution) / cfg.angular_resolution


__all__ = [
    "EmptyGridError", "GridConfig", "VoxelKey", "VoxelStats", "SphericalGrid",
    "ScanStats", "build_grid", "assign_points", "assignment_lists", "new_scan_stats",
    "spherical", "column_index", "group_statistics", "sorted_eigh", "voxel_contains",
    "radial_bins", "realized_resolution_error",
]
