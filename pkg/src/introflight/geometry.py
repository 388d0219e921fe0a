"""SE(3) poses and the pinhole camera model shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle (radians) the Rodrigues coefficients switch to their
# Taylor expansions to avoid 0/0.
_SMALL_ANGLE = 1e-8


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(w) @ p == cross(w, p)."""
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector to rotation matrix."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector of a rotation matrix (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _SMALL_ANGLE:
        # First-order: R ~ I + hat(w).
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # Near pi the off-diagonal formula degenerates; recover the axis from
        # the symmetric part instead.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # Fix signs using the largest component.
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            signs = A[k] / axis[k]
            axis = np.where(np.arange(3) == k, axis, signs)
        n = np.linalg.norm(axis)
        if n > 0.0:
            axis = axis / n
        return axis * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * (theta / (2.0 * np.sin(theta)))


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians, in [0, pi]."""
    cos_theta = np.clip((np.trace(np.asarray(R, dtype=float)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_theta))


def _so3_v_matrix(w: np.ndarray) -> np.ndarray:
    """Left Jacobian V of SO(3): exp translation coupling, t = V @ v."""
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * K + c * (K @ K)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose":
        """Exponential map of a twist (vx, vy, vz, wx, wy, wz)."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        v, w = xi[:3], xi[3:]
        R = rotation_exp(w)
        t = _so3_v_matrix(w) @ v
        return Pose(R, t)

    def log(self) -> np.ndarray:
        """Twist (v, w) such that Pose.exp of it reproduces this pose."""
        w = rotation_log(self.rotation)
        V = _so3_v_matrix(w)
        v = np.linalg.solve(V, self.translation)
        return np.concatenate([v, w])

    def compose(self, other: "Pose") -> "Pose":
        """self then applied after other: (self o other)(p) = self(other(p))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def renormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) (drift control)."""
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0.0:
            U[:, -1] = -U[:, -1]
            R = U @ Vt
        return Pose(R, self.translation)


def look_pose(position: np.ndarray, yaw: float, pitch: float = 0.0) -> Pose:
    """World-from-camera pose of a level camera at `position`.

    World frame: x/y horizontal, z up. Camera frame: x right, y down,
    z forward (optical axis). yaw rotates the optical axis in the horizontal
    plane (0 = world +x); positive pitch tips it upward.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    # Columns are the camera axes expressed in world coordinates.
    R = np.array(
        [
            [sy, 0.0, cy],
            [-cy, 0.0, sy],
            [0.0, -1.0, 0.0],
        ]
    )
    if pitch != 0.0:
        # Rotate about the camera x axis; positive tips z toward -y (up).
        cp, sp = np.cos(pitch), np.sin(pitch)
        Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
        R = R @ Rx
    return Pose(R, np.asarray(position, dtype=float))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: u = cx + fx*x/z, v = cy + fy*y/z."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points to pixel coordinates; rejects z <= 0."""
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        z = p[:, 2]
        if np.any(z <= 0.0):
            raise ValueError("point behind camera")
        uv = np.stack([self.cx + self.fx * p[:, 0] / z, self.cy + self.fy * p[:, 1] / z], axis=1)
        return uv[0] if single else uv

    def unproject(self, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus depth (along the optical axis) to 3-D."""
        uv = np.asarray(pixels, dtype=float)
        single = uv.ndim == 1
        uv = np.atleast_2d(uv)
        z = np.broadcast_to(np.asarray(depth, dtype=float), uv.shape[0]).astype(float)
        x = (uv[:, 0] - self.cx) / self.fx * z
        y = (uv[:, 1] - self.cy) / self.fy * z
        p = np.stack([x, y, z], axis=1)
        return p[0] if single else p

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinate arrays of shape (height, width)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return u, v

    def ray_directions(self) -> np.ndarray:
        """Per-pixel ray directions in the camera frame, z component 1.

        Shape (height, width, 3); multiplying by depth gives camera points.
        """
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the image downsampled by 2**factor with 2x2 means.

        Coarse pixel centers sit at u_fine = 2*u_coarse + 0.5 per level.
        """
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        w, h = self.width, self.height
        for _ in range(factor):
            fx, fy = fx / 2.0, fy / 2.0
            cx, cy = (cx - 0.5) / 2.0, (cy - 0.5) / 2.0
            w, h = w // 2, h // 2
        return CameraIntrinsics(fx, fy, cx, cy, w, h)
