"""SE(3) poses, pinhole camera model, and triangulation primitives.

Conventions used throughout the package:

* Camera frame: x-right, y-down, z-forward.
* A ``Pose`` maps world coordinates into camera coordinates,
  ``x_cam = R @ x_world + t``.
* Pixel coordinates are continuous; the pixel with index ``(u, v)`` samples
  the continuous coordinate ``(u, v)`` exactly. A point is in frame when
  ``0 <= u < width`` and ``0 <= v < height`` and its depth is positive.
* Trajectory text files store the row-major 3x4 ``[R|t]`` matrix mapping
  camera to world (the public KITTI odometry convention); loading converts
  to the world-to-camera convention above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DegenerateGeometry, InvalidArgument

_ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


def skew(v: np.ndarray) -> np.ndarray:
    """Matrix representation of the cross product, ``skew(v) @ x == cross(v, x)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor fallback for small angles.

    ``w`` is an axis-angle rotation vector (axis * angle, radians).
    """
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        # sin(t)/t and (1-cos(t))/t^2 to second order; avoids 0/0.
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_axis_angle` for angles in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    trace = float(np.trace(R))
    cos_theta = min(1.0, max(-1.0, (trace - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    if math.pi - theta < 1e-4:
        # Near pi the vee part vanishes; recover the axis from R + I.
        A = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / math.sqrt(max(A[k, k], 1e-300))
        axis = axis / np.linalg.norm(axis)
        if vee @ axis < 0.0:
            axis = -axis
        return theta * axis
    return (theta / (2.0 * math.sin(theta))) * vee


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping world coordinates to camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _readonly(self.rotation)
        t = _readonly(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise InvalidArgument(f"rotation must be 3x3, got {R.shape}")
        err = np.max(np.abs(R.T @ R - np.eye(3)))
        if err >= _ORTHO_TOL or np.linalg.det(R) <= 0:
            raise InvalidArgument(f"rotation is not orthonormal (|R^T R - I| = {err:.3g})")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_quaternion(q_wxyz: Sequence[float], translation: Sequence[float]) -> "Pose":
        """Build a pose from a (w, x, y, z) unit quaternion. Boundary I/O helper."""
        from scipy.spatial.transform import Rotation

        w, x, y, z = q_wxyz
        R = Rotation.from_quat([x, y, z, w]).as_matrix()
        return Pose(R, np.asarray(translation, dtype=np.float64))

    def to_quaternion(self) -> np.ndarray:
        """Rotation as a (w, x, y, z) unit quaternion with w >= 0."""
        from scipy.spatial.transform import Rotation

        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        return q if w >= 0 else -q

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self`` after ``other``: the transform applying ``other`` first."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one (3,) point or a stack (N, 3) of world points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def orthonormalized(self) -> "Pose":
        """Project the rotation back onto SO(3); useful after long compose chains."""
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.translation)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            np.max(np.abs(self.rotation - other.rotation)) < tol
            and np.max(np.abs(self.translation - other.translation)) < tol
        )


@dataclass(frozen=True)
class Twist:
    """Relative camera motion: translation (m) plus axis-angle rotation (rad)."""

    translational: np.ndarray
    rotational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translational", _readonly(self.translational).reshape(3))
        object.__setattr__(self, "rotational", _readonly(self.rotational).reshape(3))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translational, self.rotational])


def exp_map(twist: Twist) -> Pose:
    """Pose for a twist: Rodrigues rotation, translation taken verbatim."""
    return Pose(rotation_from_axis_angle(twist.rotational), twist.translational)


def log_map(pose: Pose) -> Twist:
    """Inverse of :func:`exp_map` for rotation angles below pi."""
    return Twist(pose.translation, axis_angle_from_rotation(pose.rotation))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; no distortion model."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class Pixel(NamedTuple):
    """Fractional pixel coordinate; ``d`` is camera-frame depth when projected."""

    u: float
    v: float
    d: float = 0.0


def project_points(
    points: np.ndarray, K: CameraIntrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (N, 3) to pixel coordinates.

    Returns ``(uvd, valid)`` where ``uvd`` is (N, 3) with columns (u, v, depth)
    and ``valid`` marks points with positive depth that land inside the image.
    Rows with ``valid == False`` hold unusable values.
    """
    cam = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    valid = in_front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return np.stack([u, v, z], axis=1), valid


def project(q: np.ndarray, K: CameraIntrinsics, pose: Pose) -> Optional[Pixel]:
    """Pinhole projection of one world point; ``None`` when out of frustum."""
    uvd, valid = project_points(np.asarray(q, dtype=np.float64).reshape(1, 3), K, pose)
    if not valid[0]:
        return None
    return Pixel(float(uvd[0, 0]), float(uvd[0, 1]), float(uvd[0, 2]))


def backproject_pixels(
    uv: np.ndarray, depth: np.ndarray, K: CameraIntrinsics, pose: Pose
) -> np.ndarray:
    """World points for pixel coordinates (N, 2) at the given depths (N,)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (uv[:, 0] - K.cx) / K.fx * depth
    y = (uv[:, 1] - K.cy) / K.fy * depth
    cam = np.stack([x, y, depth], axis=1)
    return (cam - pose.translation) @ pose.rotation


def backproject(p, depth: float, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """World point whose projection through (K, pose) is ``p`` at ``depth``."""
    if depth <= 0:
        raise InvalidArgument(f"depth must be positive, got {depth}")
    u, v = p[0], p[1]
    return backproject_pixels(np.array([[u, v]]), np.array([depth]), K, pose)[0]


def pixel_grid_rays(K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions, one per pixel, shape (H, W, 3), z = 1."""
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)


def backproject_grid(depth: np.ndarray, K: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Backproject a full depth image to world points.

    Returns ``(points, valid)``: points is (H, W, 3); pixels with non-finite
    or non-positive depth are invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    rays = pixel_grid_rays(K)
    d = np.where(valid, depth, 1.0)
    cam = rays * d[..., None]
    pts = (cam.reshape(-1, 3) - pose.translation) @ pose.rotation
    return pts.reshape(depth.shape + (3,)), valid


def triangulate(p1, p2, K: CameraIntrinsics, pose1: Pose, pose2: Pose) -> np.ndarray:
    """Linear (DLT) two-view triangulation in normalized camera coordinates.

    Returns the world point; the caller inspects per-camera depth signs.
    Raises :class:`DegenerateGeometry` when the system has no unique
    solution (zero baseline or parallel rays).
    """
    baseline = np.linalg.norm(pose1.center() - pose2.center())
    if baseline < 1e-12:
        raise DegenerateGeometry("zero baseline: both views share a camera center")
    x1 = np.array([(p1[0] - K.cx) / K.fx, (p1[1] - K.cy) / K.fy])
    x2 = np.array([(p2[0] - K.cx) / K.fx, (p2[1] - K.cy) / K.fy])
    rows = []
    for x, pose in ((x1, pose1), (x2, pose2)):
        M = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
        rows.append(x[0] * M[2] - M[0])
        rows.append(x[1] * M[2] - M[1])
    A = np.stack(rows)
    _, s, Vt = np.linalg.svd(A)
    # A unique solution has exactly one vanishing singular value; two means
    # the rays are parallel or the views coincide.
    if s[2] < 1e-10 * s[0]:
        raise DegenerateGeometry("triangulation is rank-deficient (parallel rays or zero baseline)")
    X = Vt[-1]
    if abs(X[3]) < 1e-14 * np.linalg.norm(X[:3]):
        raise DegenerateGeometry("triangulated point is at infinity")
    return X[:3] / X[3]


def pose_from_position_heading(position, heading_xy, pitch_down: float = 0.35) -> Pose:
    """Forward-facing camera pose at ``position`` looking along ``heading_xy``.

    Assumes a z-up world; ``pitch_down`` tilts the optical axis below the
    horizon (radians) so the ground stays in view.
    """
    position = np.asarray(position, dtype=np.float64)
    hx, hy = heading_xy
    norm = math.hypot(hx, hy)
    if norm < 1e-12:
        raise InvalidArgument("heading must be non-zero")
    psi = math.atan2(hy, hx)
    f = np.array([math.cos(psi), math.sin(psi), 0.0])
    right = np.array([math.sin(psi), -math.cos(psi), 0.0])
    forward = math.cos(pitch_down) * f - math.sin(pitch_down) * np.array([0.0, 0.0, 1.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose(R, -R @ position)


def parse_pose_line(line: str) -> Pose:
    """Parse one 12-number [R|t] camera-to-world line into a world-to-camera pose."""
    parts = line.split()
    if len(parts) != 12:
        raise InvalidArgument(f"expected 12 numbers, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as e:
        raise InvalidArgument(str(e)) from None
    m = vals.reshape(3, 4)
    R_cw, t_cw = m[:, :3], m[:, 3]
    err = np.max(np.abs(R_cw.T @ R_cw - np.eye(3)))
    if err > 1e-6:
        raise InvalidArgument(f"rotation block is not orthonormal (error {err:.3g})")
    # Re-orthonormalize to absorb the limited precision of text files.
    U, _, Vt = np.linalg.svd(R_cw)
    R_cw = U @ Vt
    if np.linalg.det(R_cw) < 0:
        raise InvalidArgument("rotation block has negative determinant")
    return Pose(R_cw.T, -R_cw.T @ t_cw)


def format_pose_line(pose: Pose) -> str:
    """Inverse of :func:`parse_pose_line` (writes camera-to-world)."""
    R_cw = pose.rotation.T
    t_cw = -R_cw @ pose.translation
    m = np.hstack([R_cw, t_cw.reshape(3, 1)])
    return " ".join(f"{x:.17g}" for x in m.reshape(-1))
