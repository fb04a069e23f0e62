"""Shared domain types: camera model, rigid transforms, frames, and actions.

Conventions used throughout the package:

* Pixel coordinates are (x, y) with x the column and y the row; integer
  coordinates address pixel centers.
* Camera frame: +x right, +y down, +z forward (into the scene).
* ``RigidTransform`` acts on points as ``R @ p + t``; ``camera_pose`` maps
  camera coordinates to world coordinates.
* Depth value 0 is the invalid/background sentinel; every consumer must
  skip such pixels.
* Color values are floats in [0, 1], so the per-pixel L2 color distance
  lives in [0, sqrt(3)] independent of bit depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import BehindCamera, InvalidDepth, OutOfBounds

# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z), unit norm


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) <= 1e-12:  # keep already-unit quaternions bit-stable
        return q
    return q / n


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return _quat_normalize(q)


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformMagnitude:
    """Decomposed size of a rigid transform.

    The two components are deliberately not mixed into one scalar; callers
    threshold translation (meters) and rotation (radians) separately.
    """

    translation_norm: float
    rotation_angle: float

    def __post_init__(self):
        if self.translation_norm < 0 or self.rotation_angle < 0:
            raise ValueError("magnitudes must be non-negative")
        if self.rotation_angle > math.pi + 1e-12:
            raise ValueError("rotation angle exceeds pi")


class RigidTransform:
    """SE(3) element stored as a unit quaternion plus translation.

    Quaternions are renormalized after every composition so that long servo
    episodes do not accumulate orthonormality drift; the matrix view is
    computed on demand and cached.
    """

    __slots__ = ("quat", "translation", "_matrix")

    def __init__(self, quat, translation):
        q = _quat_normalize(np.asarray(quat, dtype=np.float64).copy())
        if q[0] < 0.0:  # canonical sign, makes equal rotations bit-comparable
            q = -q
        t = np.asarray(translation, dtype=np.float64).copy().reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_matrix", None)

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    # constructors -----------------------------------------------------

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(rotation, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(_matrix_to_quat(np.asarray(rotation, dtype=np.float64)), translation)

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            if abs(angle) > 1e-15:
                raise ValueError("zero axis with nonzero angle")
            return RigidTransform(np.array([1.0, 0, 0, 0]), translation)
        half = 0.5 * angle
        q = np.concatenate([[math.cos(half)], math.sin(half) * axis / n])
        return RigidTransform(q, translation)

    @staticmethod
    def rot_z(angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform.from_axis_angle((0.0, 0.0, 1.0), angle, translation)

    @staticmethod
    def from_translation(translation) -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), translation)

    # views --------------------------------------------------------------

    @property
    def rotation(self) -> np.ndarray:
        """3x3 rotation matrix view (computed once, cached)."""
        m = self._matrix
        if m is None:
            m = _quat_to_matrix(self.quat)
            m.setflags(write=False)
            object.__setattr__(self, "_matrix", m)
        return m

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def yaw(self) -> float:
        """Rotation angle about +z for upright poses (used by the simulator)."""
        r = self.rotation
        return math.atan2(r[1, 0], r[0, 0])

    # algebra ------------------------------------------------------------

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self applied after other: (self*other)(p) = self(other(p))."""
        q = _quat_mul(self.quat, other.quat)
        t = self.rotation @ other.translation + self.translation
        return RigidTransform(q, t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        q = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        t = -(_quat_to_matrix(q) @ self.translation)
        return RigidTransform(q, t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) stack of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def scaled(self, fraction: float) -> "RigidTransform":
        """Scale the screw motion: rotation angle and translation by fraction."""
        w = min(1.0, max(-1.0, float(self.quat[0])))
        angle = 2.0 * math.atan2(float(np.linalg.norm(self.quat[1:])), w)
        if angle < 1e-12:
            return RigidTransform(np.array([1.0, 0, 0, 0]), fraction * self.translation)
        axis = self.quat[1:] / np.linalg.norm(self.quat[1:])
        return RigidTransform.from_axis_angle(axis, fraction * angle, fraction * self.translation)

    def magnitude(self) -> TransformMagnitude:
        return magnitude(self)

    # misc ---------------------------------------------------------------

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.quat.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(quat=[{q}], t=[{t}])"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(a: RigidTransform) -> RigidTransform:
    return a.inverse()


def magnitude(t: RigidTransform) -> TransformMagnitude:
    """Translation norm and rotation angle of a transform.

    The rotation angle is recovered from the quaternion as
    2*atan2(|xyz|, |w|), which equals arccos((trace(R)-1)/2) clamped to
    [0, pi] but is exact for the conjugate, so magnitude(inverse(t)) equals
    magnitude(t) bit-for-bit in the rotation component.
    """
    w = abs(float(t.quat[0]))
    v = float(np.linalg.norm(t.quat[1:]))
    return TransformMagnitude(float(np.linalg.norm(t.translation)), 2.0 * math.atan2(v, w))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


class Gripper(Enum):
    OPEN = "open"
    CLOSE = "close"
    HOLD = "hold"


@dataclass(frozen=True)
class Action:
    """End-effector-frame pose correction plus a gripper command."""

    delta: RigidTransform
    gripper: Gripper = Gripper.HOLD

    @staticmethod
    def hold() -> "Action":
        return Action(RigidTransform.identity(), Gripper.HOLD)


class Frame:
    """One RGB-D observation with per-pixel object ids.

    Arrays are kept read-only; a Frame is an immutable value safe to share
    across workers. ``rgb`` is float32 in [0, 1], ``depth`` is float32
    meters with 0 marking invalid pixels, ``object_ids`` is int32 with 0
    for background.
    """

    __slots__ = ("rgb", "depth", "object_ids", "intrinsics", "camera_pose")

    def __init__(self, rgb, depth, object_ids, intrinsics: CameraIntrinsics, camera_pose: RigidTransform):
        rgb = np.ascontiguousarray(rgb, dtype=np.float32)
        depth = np.ascontiguousarray(depth, dtype=np.float32)
        object_ids = np.ascontiguousarray(object_ids, dtype=np.int32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be HxWx3")
        if depth.shape != rgb.shape[:2] or object_ids.shape != rgb.shape[:2]:
            raise ValueError("rgb, depth and object_ids must share HxW")
        if (rgb.shape[0], rgb.shape[1]) != (intrinsics.height, intrinsics.width):
            raise ValueError("image size disagrees with intrinsics")
        if np.any(depth < 0):
            raise ValueError("depth must be non-negative")
        if np.any((object_ids != 0) & (depth == 0)):
            raise ValueError("object pixels must carry valid depth")
        for a in (rgb, depth, object_ids):
            a.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "object_ids", object_ids)
        object.__setattr__(self, "intrinsics", intrinsics)
        object.__setattr__(self, "camera_pose", camera_pose)

    def __setattr__(self, name, value):
        raise AttributeError("Frame is immutable")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def mask_of(self, object_id: int) -> np.ndarray:
        return self.object_ids == object_id

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return bool(
            np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.object_ids, other.object_ids)
            and self.intrinsics == other.intrinsics
            and self.camera_pose == other.camera_pose
        )

    def __hash__(self):
        return hash((self.rgb.tobytes(), self.depth.tobytes()))


# ---------------------------------------------------------------------------
# projection


def unproject(frame: Frame, pixel) -> np.ndarray:
    """Lift an integer pixel with valid depth to camera coordinates.

    Returns (d*(x-cx)/fx, d*(y-cy)/fy, d) with d = depth(x, y).
    """
    x, y = int(pixel[0]), int(pixel[1])
    k = frame.intrinsics
    if not (0 <= x < k.width and 0 <= y < k.height):
        raise OutOfBounds(f"pixel ({x}, {y}) outside {k.width}x{k.height}")
    d = float(frame.depth[y, x])
    if d == 0.0:
        raise InvalidDepth(f"no depth at ({x}, {y})")
    return np.array([d * (x - k.cx) / k.fx, d * (y - k.cy) / k.fy, d])


def unproject_points(intrinsics: CameraIntrinsics, xs, ys, depths) -> np.ndarray:
    """Vectorized unprojection at (sub)pixel coordinates with given depths."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    return np.stack(
        [d * (xs - intrinsics.cx) / intrinsics.fx, d * (ys - intrinsics.cy) / intrinsics.fy, d],
        axis=-1,
    )


def project(intrinsics: CameraIntrinsics, point3) -> tuple[float, float]:
    """Project a camera-frame point to continuous pixel coordinates."""
    p = np.asarray(point3, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCamera(f"z = {p[2]}")
    return (
        float(intrinsics.fx * p[0] / p[2] + intrinsics.cx),
        float(intrinsics.fy * p[1] / p[2] + intrinsics.cy),
    )


def project_points(intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Vectorized projection of (N, 3) camera-frame points; z must be > 0."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    out = np.empty(p.shape[:-1] + (2,))
    out[..., 0] = intrinsics.fx * p[..., 0] / z + intrinsics.cx
    out[..., 1] = intrinsics.fy * p[..., 1] / z + intrinsics.cy
    return out


def clamp_action_delta(delta: RigidTransform, max_translation: float, max_rotation: float) -> RigidTransform:
    """Scale a correction so translation and rotation respect per-step limits.

    Translation and rotation are limited independently; each keeps its
    direction/axis and only the magnitude shrinks.
    """
    mag = magnitude(delta)
    t_scale = 1.0 if mag.translation_norm <= max_translation else max_translation / mag.translation_norm
    r_scale = 1.0 if mag.rotation_angle <= max_rotation else max_rotation / mag.rotation_angle
    if t_scale == 1.0 and r_scale == 1.0:
        return delta
    rot_part = RigidTransform(delta.quat, np.zeros(3)).scaled(r_scale)
    return RigidTransform(rot_part.quat, delta.translation * t_scale)
