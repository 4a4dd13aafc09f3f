"""Pinhole cameras, rigid transforms, quaternions and covariance projection.

Conventions: camera frame is x-right, y-down, z-forward; poses map world to
camera as ``x_c = R @ x_w + t``; pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``
so its center sits at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

NEAR_PLANE = 0.01
LOWPASS_FLOOR = 0.3  # px^2 added to the projected covariance diagonal
CAMERA_PLANE_EPS = 1e-8


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < 1e-12:
            raise ValueError("degenerate quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        s = np.sin(angle / 2)
        return cls(float(np.cos(angle / 2)), *(float(a * s) for a in axis))


def _quat_array(q) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    return np.asarray(q, dtype=np.float64).reshape(4)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion ``(w, x, y, z)``."""
    arr = _quat_array(q)
    n = np.linalg.norm(arr)
    if not n > 1e-12:
        raise ValueError("degenerate quaternion")
    w, x, y, z = arr / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> Quaternion:
    """Inverse of :func:`quat_to_rotmat`, returning the ``w >= 0`` representative."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return Quaternion(*(float(c) for c in q)).normalized()


def build_covariance(q, scales) -> np.ndarray:
    """3D covariance ``R diag(s^2) R^T`` of a Gaussian with rotation ``q``."""
    s = np.asarray(scales, dtype=np.float64).reshape(3)
    if not np.all(s > 0):
        raise ValueError("invalid scale")
    M = quat_to_rotmat(q) * s[None, :]
    return M @ M.T


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return cls(T[:3, :3], T[:3, 3])


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float, pose=None) -> "Camera":
        fx = width / (2.0 * np.tan(np.radians(fov_x_deg) / 2.0))
        return cls(fx, fx, width / 2.0, height / 2.0, width, height, pose or RigidTransform())


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose placing the camera at ``eye`` looking at ``target``.

    ``up`` defaults to -y because image rows grow along +y.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(-np.asarray(up, dtype=np.float64), forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return RigidTransform(R, -R @ eye)


class Projection(NamedTuple):
    u: float
    v: float
    z: float
    valid: bool


def project_point(cam: Camera, X) -> Projection:
    """Project a world point. ``valid`` is False at the camera plane."""
    xc, yc, zc = cam.pose.apply(X)
    if abs(zc) < CAMERA_PLANE_EPS:
        return Projection(float("nan"), float("nan"), float(zc), False)
    return Projection(cam.fx * xc / zc + cam.cx, cam.fy * yc / zc + cam.cy, float(zc), True)


def unproject_pixel(cam: Camera, u: float, v: float, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError("non-positive depth")
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.pose.inverse().apply(pc)


def pixel_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and (H, W, 3) directions through every pixel center.

    Directions are scaled so their camera-frame z component is 1, hence the ray
    parameter at a hit equals its camera-frame depth.
    """
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    dc = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    return cam.center, dc @ cam.pose.rotation


def projection_jacobian(cam: Camera, p_cam) -> np.ndarray:
    """2x3 Jacobian of ``(u, v)`` with respect to the camera-frame point."""
    x, y, z = np.asarray(p_cam, dtype=np.float64)
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )


def project_covariance(cam: Camera, mu, sigma, floor: float = LOWPASS_FLOOR):
    """Screen-space covariance ``J W Σ W^T J^T + floor·I``; None if culled by the near plane."""
    p = cam.pose.apply(mu)
    if p[2] <= NEAR_PLANE:
        return None
    J = projection_jacobian(cam, p)
    W = cam.pose.rotation
    cov = J @ W @ np.asarray(sigma, dtype=np.float64) @ W.T @ J.T
    cov = 0.5 * (cov + cov.T)
    return cov + floor * np.eye(2)
