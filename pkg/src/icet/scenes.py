"""Synthetic LIDAR scans of abstract corner-case scenes.

Every scene is a set of axis-aligned rectangles in a world frame whose
origin is the reference sensor position, 2 m above the floor.  A scan casts
rays on a regular azimuth/elevation lattice, keeps the first hit within
``max_range``, and adds independent Gaussian noise to each coordinate.

Sensor poses use the registration convention: a point ``p`` in the sensor
frame sits at ``R p - t`` in the world, so the sensor origin is at ``-t``.
Registering a scan taken at pose ``s`` against one taken at the origin
therefore recovers ``s``.

Scenes
------
``t_intersection``
    A 12 m wide street along +y meeting a 12 m wide cross street 15 m
    ahead; the cross street ends in walls at x = +-40 m.  Walls are 10 m tall.
``tunnel``
    8 m wide, 6 m tall, 200 m long, along y.
``open_field``
    A single ground plane.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .geometry import StateVector, rotation_from_state, state_from_matrix, state_to_matrix
from .pointcloud_io import PointCloud

SceneKind = Literal["t_intersection", "tunnel", "open_field"]
SCENE_KINDS: tuple[str, ...] = ("t_intersection", "tunnel", "open_field")

# default true displacement for scene pairs (m, m, m, rad, rad, rad)
DEFAULT_TRUTH = StateVector(0.01, 0.03, 0.02, 0.12, 0.10, 0.20)


class ScenePoseError(ValueError):
    """Sensor pose lies outside the scene's drivable region."""


class Rect(NamedTuple):
    """Axis-aligned rectangle ``coord[axis] == offset`` with bounds on the two
    remaining axes (in increasing axis order)."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]


@dataclass(frozen=True)
class SceneSpec:
    kind: SceneKind = "t_intersection"
    noise_sigma: float = 0.002
    seed: int = 0
    az_step: float = 0.2
    el_step: float = 0.5
    el_span: tuple[float, float] = (-40.0, 40.0)
    max_range: float = 60.0
    min_range: float = 0.5
    sensor_height: float = 2.0
    wall_height: float = 10.0
    corridor_width: float = 12.0
    junction_distance: float = 15.0
    end_wall: float = 40.0
    tunnel_width: float = 8.0
    tunnel_height: float = 6.0
    tunnel_length: float = 200.0
    margin: float = 20.0

    def __post_init__(self) -> None:
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.az_step <= 0 or self.el_step <= 0:
            raise ValueError("lattice steps must be positive")
        object.__setattr__(self, "el_span", (float(self.el_span[0]), float(self.el_span[1])))

    def surfaces(self) -> list[Rect]:
        h = self.sensor_height
        big = 1e4
        if self.kind == "open_field":
            return [Rect(2, -h, (-big, -big), (big, big))]
        if self.kind == "tunnel":
            w = self.tunnel_width / 2
            half = self.tunnel_length / 2
            top = self.tunnel_height - h
            return [
                Rect(0, -w, (-half, -h), (half, top)),
                Rect(0, w, (-half, -h), (half, top)),
                Rect(2, -h, (-w, -half), (w, half)),
                Rect(2, top, (-w, -half), (w, half)),
            ]
        w = self.corridor_width / 2
        y0 = self.junction_distance
        y1 = y0 + self.corridor_width
        e = self.end_wall
        top = self.wall_height - h
        back = -10.0 * self.max_range
        return [
            Rect(0, -w, (back, -h), (y0, top)),
            Rect(0, w, (back, -h), (y0, top)),
            Rect(1, y0, (-e, -h), (-w, top)),
            Rect(1, y0, (w, -h), (e, top)),
            Rect(1, y1, (-e, -h), (e, top)),
            Rect(0, -e, (y0, -h), (y1, top)),
            Rect(0, e, (y0, -h), (y1, top)),
            Rect(2, -h, (-big, back), (big, big)),
        ]

    def check_pose(self, pose: StateVector) -> None:
        """Raise :class:`ScenePoseError` unless the sensor sits in free space
        with at least ``margin`` to the scene's far boundaries."""
        sx, sy, sz = -pose.translation
        h = self.sensor_height
        if sz <= -h:
            raise ScenePoseError(f"sensor below the floor (z={sz:.3f})")
        if self.kind == "tunnel":
            inside = (abs(sx) < self.tunnel_width / 2 and sz < self.tunnel_height - h
                      and abs(sy) + self.max_range <= self.tunnel_length / 2 - self.margin)
        elif self.kind == "t_intersection":
            w = self.corridor_width / 2
            y0 = self.junction_distance
            in_stem = abs(sx) < w and sy < y0
            in_cross = abs(sx) < self.end_wall and y0 <= sy < y0 + self.corridor_width
            inside = (in_stem or in_cross) and sz < self.wall_height - h
        else:
            inside = True
        if not inside:
            raise ScenePoseError(f"sensor position ({sx:.3f}, {sy:.3f}, {sz:.3f}) is outside the {self.kind} scene")


def ray_lattice(spec: SceneSpec) -> np.ndarray:
    """Unit ray directions in the sensor frame, (n, 3).  Lattice nodes sit at
    half-step offsets so none falls exactly on a whole-degree boundary."""
    n_az = int(round(360.0 / spec.az_step))
    el0, el1 = spec.el_span
    n_el = max(1, int(round((el1 - el0) / spec.el_step)))
    az = np.radians((np.arange(n_az) + 0.5) * (360.0 / n_az))
    el = np.radians(el0 + (np.arange(n_el) + 0.5) * ((el1 - el0) / n_el))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    ce = np.cos(ee)
    return np.stack([ce * np.cos(aa), ce * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)


def cast_rays(
    origin: np.ndarray, dirs: np.ndarray, surfaces: Sequence[Rect], max_range: float
) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the first hit for every ray (inf when nothing is hit) and
    the index of the surface hit (-1 for none)."""
    best = np.full(dirs.shape[0], np.inf)
    which = np.full(dirs.shape[0], -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k_rect, rect in enumerate(surfaces):
            a = rect.axis
            others = [i for i in range(3) if i != a]
            d = dirs[:, a]
            t = (rect.offset - origin[a]) / d
            ok = np.isfinite(t) & (t > 0) & (t < best) & (t <= max_range)
            for k, o in enumerate(others):
                c = origin[o] + t * dirs[:, o]
                ok &= (c >= rect.lo[k]) & (c <= rect.hi[k])
            best = np.where(ok, t, best)
            which = np.where(ok, k_rect, which)
    return best, which


@functools.lru_cache(maxsize=32)
def _noiseless(geometry: SceneSpec, pose: StateVector) -> np.ndarray:
    geometry.check_pose(pose)
    dirs_s = ray_lattice(geometry)
    R = rotation_from_state(pose)
    dirs_w = dirs_s @ R.T
    surfaces = geometry.surfaces()
    origin = -pose.translation
    rng, which = cast_rays(origin, dirs_w, surfaces, geometry.max_range)
    hit = np.isfinite(rng) & (rng >= geometry.min_range)
    world = origin + dirs_w[hit] * rng[hit, None]
    # put each hit exactly on its plane before going back to the sensor frame
    for k_rect, rect in enumerate(surfaces):
        world[which[hit] == k_rect, rect.axis] = rect.offset
    pts = (world - origin) @ R
    pts.setflags(write=False)
    return pts


def noiseless_points(spec: SceneSpec, pose: StateVector) -> np.ndarray:
    """Exact hit points in the sensor frame (cached; read-only)."""
    return _noiseless(replace(spec, seed=0, noise_sigma=0.0), pose)


def sample_scene(spec: SceneSpec, pose: StateVector | None = None, seed: int | None = None) -> PointCloud:
    """One noisy scan of ``spec`` from ``pose`` (default: the origin)."""
    pose = StateVector() if pose is None else pose
    pts = noiseless_points(spec, pose)
    if spec.noise_sigma > 0:
        gen = np.random.default_rng(spec.seed if seed is None else seed)
        pts = pts + gen.normal(0.0, spec.noise_sigma, size=pts.shape)
    return PointCloud(pts)


def scene_pair(
    spec: SceneSpec,
    truth: StateVector = DEFAULT_TRUTH,
    seeds: tuple[int, int] | None = None,
) -> tuple[PointCloud, PointCloud]:
    """Reference scan at the origin and new scan at pose ``truth``."""
    if seeds is None:
        ss = np.random.SeedSequence(spec.seed)
        seeds = tuple(int(s) for s in ss.generate_state(2, dtype=np.uint64))
    ref = sample_scene(spec, StateVector(), seeds[0])
    new = sample_scene(spec, truth, seeds[1])
    return ref, new


def straight_sequence(
    spec: SceneSpec, n_frames: int, step: StateVector, seed: int = 0
) -> tuple[list[PointCloud], list[StateVector]]:
    """Scans along a trajectory where every frame moves by ``step`` relative to
    the previous one.  Returns the scans and the true per-pair increments
    (the first increment is the zero state)."""
    scans = []
    truths = [StateVector()]
    pose = np.eye(4)
    inc = state_to_matrix(step)
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_frames, dtype=np.uint64)
    for k in range(n_frames):
        if k:
            pose = pose @ inc
            truths.append(step)
        scans.append(sample_scene(spec, state_from_matrix(pose), int(seeds[k])))
    return scans, truths


def plane_residuals(points_world: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Distance from each world point to the nearest scene surface."""
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    best = np.full(pts.shape[0], np.inf)
    for rect in spec.surfaces():
        others = [i for i in range(3) if i != rect.axis]
        d = np.abs(pts[:, rect.axis] - rect.offset)
        ok = np.ones(pts.shape[0], dtype=bool)
        for k, o in enumerate(others):
            ok &= (pts[:, o] >= rect.lo[k] - 1e-6) & (pts[:, o] <= rect.hi[k] + 1e-6)
        best = np.where(ok, np.minimum(best, d), best)
    return best
