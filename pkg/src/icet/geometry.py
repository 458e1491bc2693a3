"""Rigid-body state, rotation matrices and their angle derivatives.

Conventions
-----------
The state is ``(x, y, z, phi, theta, psi)``: a translation in meters and
body-fixed XYZ Euler angles (roll, pitch, yaw) in radians.  A point ``p``
of the new scan maps into the reference frame as ``q = R p - t``.

``R`` equals ``(Rx(phi) @ Ry(theta) @ Rz(psi)).T`` where ``Rx, Ry, Rz`` are
the usual right-handed elementary rotations.  Gimbal lock at
``theta = +-pi/2`` is not guarded; scan-to-scan increments are small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Literal, Sequence

import numpy as np

Axis = Literal["phi", "theta", "psi"]

STATE_NAMES: tuple[str, ...] = ("x", "y", "z", "phi", "theta", "psi")


@dataclass(frozen=True)
class StateVector:
    """Six-component registration solution (m, m, m, rad, rad, rad)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0

    def __post_init__(self) -> None:
        for name in STATE_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"state component {name} is not finite: {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray) -> StateVector:
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.shape != (6,):
            raise ValueError(f"expected 6 state components, got {arr.shape}")
        return cls(*(float(v) for v in arr))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.phi, self.theta, self.psi])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __iter__(self) -> Iterator[float]:
        return iter(self.as_array().tolist())

    def __add__(self, other: StateVector) -> StateVector:
        return StateVector.from_array(self.as_array() + other.as_array())

    def __sub__(self, other: StateVector) -> StateVector:
        return StateVector.from_array(self.as_array() - other.as_array())

    def to_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in STATE_NAMES}


def _trig(s: StateVector) -> tuple[float, float, float, float, float, float]:
    return (
        math.sin(s.phi), math.cos(s.phi),
        math.sin(s.theta), math.cos(s.theta),
        math.sin(s.psi), math.cos(s.psi),
    )


def rotation_from_state(s: StateVector) -> np.ndarray:
    """3x3 rotation matrix built from the roll, pitch and yaw of ``s``."""
    sf, cf, st, ct, sp, cp = _trig(s)
    return np.array([
        [ct * cp, sp * cf + sf * st * cp, sf * sp - st * cf * cp],
        [-sp * ct, cf * cp - sf * st * sp, sf * cp + st * sp * cf],
        [st, -sf * ct, cf * ct],
    ])


def rotation_derivative(s: StateVector, axis: Axis) -> np.ndarray:
    """Analytic partial derivative of :func:`rotation_from_state` w.r.t. one angle.

    Entry (1, 2) of the roll derivative is ``cos(phi) cos(psi) - ...``; the
    commonly printed ``cos(phi) cos(phi)`` form is a typo and disagrees with
    finite differences of the rotation matrix.
    """
    sf, cf, st, ct, sp, cp = _trig(s)
    if axis == "phi":
        return np.array([
            [0.0, -sp * sf + cf * st * cp, cf * sp + st * sf * cp],
            [0.0, -sf * cp - cf * st * sp, cf * cp - st * sp * sf],
            [0.0, -cf * ct, -sf * ct],
        ])
    if axis == "theta":
        return np.array([
            [-st * cp, ct * sf * cp, -ct * cf * cp],
            [sp * st, -ct * sf * sp, ct * sp * cf],
            [ct, sf * st, -st * cf],
        ])
    if axis == "psi":
        return np.array([
            [-ct * sp, cp * cf - sf * st * sp, cp * sf + st * cf * sp],
            [-cp * ct, -sp * cf - sf * st * cp, st * cp * cf - sf * sp],
            [0.0, 0.0, 0.0],
        ])
    raise ValueError(f"unknown rotation axis {axis!r}")


def rotation_derivatives(s: StateVector) -> np.ndarray:
    """Stack of the three derivatives, shape (3, 3, 3), ordered phi, theta, psi."""
    return np.stack([rotation_derivative(s, a) for a in ("phi", "theta", "psi")])


def transform_array(points: np.ndarray, s: StateVector) -> np.ndarray:
    """Apply ``q = R p - t`` row-wise to an (N, 3) array."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ rotation_from_state(s).T - s.translation


def transform_points(cloud, s: StateVector):
    """Map every point of ``cloud`` into the reference frame; metadata is kept."""
    return cloud.with_points(transform_array(cloud.points, s))


def state_to_matrix(s: StateVector) -> np.ndarray:
    """4x4 homogeneous matrix of the affine map ``p -> R p - t``."""
    m = np.eye(4)
    m[:3, :3] = rotation_from_state(s)
    m[:3, 3] = -s.translation
    return m


def state_from_matrix(m: np.ndarray) -> StateVector:
    """Inverse of :func:`state_to_matrix` (angles recovered in the principal range)."""
    r = np.asarray(m, dtype=float)[:3, :3]
    theta = math.asin(max(-1.0, min(1.0, r[2, 0])))
    phi = math.atan2(-r[2, 1], r[2, 2])
    psi = math.atan2(-r[1, 0], r[0, 0])
    t = -np.asarray(m, dtype=float)[:3, 3]
    return StateVector(t[0], t[1], t[2], phi, theta, psi)


def inverse_state(s: StateVector) -> StateVector:
    """State whose transform undoes ``s``."""
    return state_from_matrix(np.linalg.inv(state_to_matrix(s)))


def compose(first: StateVector, second: StateVector) -> StateVector:
    """State equivalent to applying ``second`` and then ``first``."""
    return state_from_matrix(state_to_matrix(first) @ state_to_matrix(second))
