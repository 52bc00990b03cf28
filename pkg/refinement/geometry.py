"""
Rotation-group math, rigid poses and the local pose parameterization the
optimizer works in.

A pose maps object-frame points into the camera frame: ``x_cam = R p + t``.
The optimizer never touches (R, t) directly; it moves a ``PoseDelta`` around
a ``ReferenceFrame`` anchored at the initial proposal:

* ``theta_r`` - axis-angle in the camera frame, ``R = exp([theta_r]x) R0``
* ``theta_l`` - pixel offset of the projected object center inside the
  reference patch
* ``theta_d`` - log depth ratio, ``z = exp(theta_d) z0``
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import DegeneratePoseError, InvalidArgumentError

ORTHONORMAL_TOL = 1e-6
TAYLOR_THRESHOLD = 1e-8


def _as_vector(values, size: int, name: str) -> np.ndarray:
    vec = np.array(values, dtype=float).reshape(-1)
    if vec.shape != (size,):
        raise InvalidArgumentError(f"{name} must have {size} elements, got shape {np.shape(values)}")
    if not np.all(np.isfinite(vec)):
        raise InvalidArgumentError(f"{name} must be finite, got {vec.tolist()}")
    return vec


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def so3_exp(axis_angle: Sequence[float]) -> np.ndarray:
    """
    Matrix exponential of the skew-symmetric embedding of ``axis_angle``.

    Closed-form Rodrigues formula; below TAYLOR_THRESHOLD the second-order
    Taylor expansion replaces the sin/theta terms.
    """
    v = _as_vector(axis_angle, 3, 'axis_angle')
    theta = float(np.linalg.norm(v))
    K = skew(v)
    K2 = K @ K
    if theta < TAYLOR_THRESHOLD:
        return np.eye(3) + K + 0.5 * K2
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K2


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle, radians) of a rotation matrix."""
    return Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_rotvec()


@dataclass(frozen=True)
class Pose:
    """Rigid transform of an object into the camera frame (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = _as_vector(self.translation, 3, 'translation')
        if R.shape != (3, 3) or not np.all(np.isfinite(R)):
            raise InvalidArgumentError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidArgumentError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise InvalidArgumentError("rotation has determinant -1 (reflection)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'rotation', R)
        object.__setattr__(self, 'translation', t)

    @classmethod
    def identity(cls, translation=(0.0, 0.0, 1.0)) -> 'Pose':
        return cls(np.eye(3), np.asarray(translation, dtype=float))

    @property
    def depth(self) -> float:
        return float(self.translation[2])

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) object-frame points into the camera frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose_object_rotation(self, rotation: np.ndarray) -> 'Pose':
        """Pre-rotate the object in its own frame, e.g. by a symmetry."""
        return Pose(self.rotation @ np.asarray(rotation, dtype=float), self.translation)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'R': self.rotation.tolist(),
            't': self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Pose':
        try:
            return cls(np.asarray(data['R'], dtype=float), np.asarray(data['t'], dtype=float))
        except KeyError as exc:
            raise InvalidArgumentError(f"Pose is missing field {exc}") from exc

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def rotation_angle_between(a: Pose, b: Pose) -> float:
    """
    Geodesic angle between two rotations, in degrees, in [0, 180].

    Evaluated as atan2(sin, cos) of the relative rotation; identical to the
    clamped arccos((trace - 1) / 2) but keeps full precision near 0 and 180.
    """
    rel = a.rotation @ b.rotation.T
    cos_angle = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    axis = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    sin_angle = min(1.0, float(np.linalg.norm(axis)) / 2.0)
    return math.degrees(math.atan2(sin_angle, float(cos_angle)))


@dataclass(frozen=True, eq=False)
class PoseDelta:
    """Local pose parameters around a ReferenceFrame."""

    theta_r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_l: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_d: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'theta_r', _as_vector(self.theta_r, 3, 'theta_r'))
        object.__setattr__(self, 'theta_l', _as_vector(self.theta_l, 2, 'theta_l'))
        theta_d = float(self.theta_d)
        if not math.isfinite(theta_d):
            raise InvalidArgumentError(f"theta_d must be finite, got {theta_d}")
        object.__setattr__(self, 'theta_d', theta_d)

    @classmethod
    def zeros(cls) -> 'PoseDelta':
        return cls()

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> 'PoseDelta':
        v = _as_vector(vector, 6, 'delta vector')
        return cls(v[0:3], v[3:5], v[5])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_r, self.theta_l, [self.theta_d]])

    def is_zero(self) -> bool:
        return not np.any(self.theta_r) and not np.any(self.theta_l) and self.theta_d == 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'theta_r': self.theta_r.tolist(),
            'theta_l': self.theta_l.tolist(),
            'theta_d': self.theta_d,
        }


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    """The coordinate system of one refinement run, fixed at the proposal."""

    pose0: Pose
    projected_center0: np.ndarray
    depth0: float
    zoom: Any  # camera.ZoomedCamera; typed loosely to avoid an import cycle

    def __post_init__(self):
        if not self.depth0 > 0:
            raise DegeneratePoseError(f"Reference depth must be positive, got {self.depth0}")
        object.__setattr__(self, 'projected_center0', _as_vector(self.projected_center0, 2, 'projected_center0'))

    @classmethod
    def at(cls, pose: Pose, intrinsics, diameter: float, out_resolution: int) -> 'ReferenceFrame':
        from .camera import make_zoom, project_to_patch

        zoom = make_zoom(intrinsics, pose, diameter, out_resolution)
        center = project_to_patch(zoom, pose, np.zeros(3))
        return cls(pose0=pose, projected_center0=center, depth0=pose.depth, zoom=zoom)


def apply_delta(frame: ReferenceFrame, delta: PoseDelta) -> Pose:
    """
    Pose addressed by ``delta`` in ``frame``.

    The lateral offset is interpreted in the reference patch, whose zoom is
    held at the proposal, so the result is a pure function of its inputs.
    """
    if delta.is_zero():
        return frame.pose0
    rotation = so3_exp(delta.theta_r) @ frame.pose0.rotation
    depth = math.exp(delta.theta_d) * frame.depth0
    pixel = frame.zoom.patch_to_base(frame.projected_center0 + delta.theta_l)
    translation = frame.zoom.base.backproject(pixel, depth)
    return Pose(rotation, translation)
