"""Rigid transforms, pinhole cameras, and 3D-to-2D projection.

Coordinates follow the vehicle convention used throughout this package:
z points forward (driving direction), y points up, x points to the side.
All distances are in meters, all pixel coordinates are continuous
(sub-pixel); discretization is left to callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EYE4 = np.eye(4)


class GeometryError(ValueError):
    """Raised when a matrix fails the rigid-transform or camera contracts."""


def _check_homogeneous_bottom_row(m: np.ndarray, what: str) -> None:
    if m.shape != (4, 4):
        raise GeometryError(f"{what} must be 4x4, got {m.shape}")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise GeometryError(f"{what} bottom row must be [0, 0, 0, 1]")


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion stored as a 4x4 homogeneous matrix.

    The rotation block must be orthonormal with determinant +1; this is
    validated at construction (tolerance 1e-9) so downstream code never
    re-checks.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        _check_homogeneous_bottom_row(m, "rigid transform")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise GeometryError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation block must have determinant +1")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(_EYE4.copy())

    @staticmethod
    def from_translation(x: float, y: float, z: float) -> "RigidTransform":
        m = np.eye(4)
        m[:3, 3] = (x, y, z)
        return RigidTransform(m)

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation by `yaw` radians about the +y (up) axis, then translate.

        Positive yaw turns +z toward +x, matching the box yaw convention.
        """
        c, s = math.cos(yaw), math.sin(yaw)
        m = np.eye(4)
        m[0, 0] = c
        m[0, 2] = s
        m[2, 0] = -s
        m[2, 2] = c
        m[:3, 3] = translation
        return RigidTransform(m)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying `other` first, then `self`."""
        return RigidTransform(self.matrix @ other.matrix)

    def invert(self) -> "RigidTransform":
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ t
        return RigidTransform(m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        out = p @ self.matrix[:3, :3].T + self.matrix[:3, 3]
        return out[0] if single else out

    @property
    def yaw(self) -> float:
        """Heading angle about +y recovered from the rotation block."""
        return math.atan2(self.matrix[0, 2], self.matrix[2, 2])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.invert()


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise GeometryError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class PixelLocation:
    u: float
    v: float
    visible: bool


class CameraModel:
    """Pinhole camera: homogeneous 4x4 intrinsic K and extrinsic E.

    E is stored world-to-camera. Construct with `extrinsic_is_world_to_camera=False`
    to pass a camera pose (camera-to-world) instead; it is inverted on entry.
    K is applied to camera-frame points and the first two components are
    divided by camera-frame depth, so K may flip axes (e.g. negative fy for
    a y-up camera frame feeding v-down pixel coordinates).
    """

    def __init__(
        self,
        K: np.ndarray,
        E: np.ndarray,
        image_width: int,
        image_height: int,
        extrinsic_is_world_to_camera: bool = True,
    ):
        K = np.asarray(K, dtype=np.float64)
        E = np.asarray(E, dtype=np.float64)
        _check_homogeneous_bottom_row(K, "intrinsic matrix")
        _check_homogeneous_bottom_row(E, "extrinsic matrix")
        if image_width <= 0 or image_height <= 0:
            raise GeometryError("image dimensions must be positive")
        if not extrinsic_is_world_to_camera:
            E = np.linalg.inv(E)
            E[3] = (0.0, 0.0, 0.0, 1.0)
        self.K = K
        self.E = E
        self.image_width = int(image_width)
        self.image_height = int(image_height)

    @staticmethod
    def pinhole(
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        image_width: int,
        image_height: int,
        E: np.ndarray | None = None,
        extrinsic_is_world_to_camera: bool = True,
    ) -> "CameraModel":
        K = np.eye(4)
        K[0, 0] = fx
        K[1, 1] = fy
        K[0, 2] = cx
        K[1, 2] = cy
        if E is None:
            E = np.eye(4)
        return CameraModel(K, E, image_width, image_height, extrinsic_is_world_to_camera)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection of (N, 3) points.

        Returns (uv, visible): uv is (N, 2) continuous pixels (NaN where the
        point sits behind the camera), visible is a boolean (N,) mask true
        only for points with positive camera-frame depth that land inside
        the image bounds.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = p.shape[0]
        hom = np.concatenate([p, np.ones((n, 1))], axis=1)
        cam = hom @ self.E.T
        depth = cam[:, 2]
        front = depth > 0.0
        q = cam @ self.K.T
        uv = np.full((n, 2), np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            uv[front] = q[front, :2] / depth[front, None]
        in_bounds = (
            front
            & (uv[:, 0] >= 0.0)
            & (uv[:, 0] < self.image_width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < self.image_height)
        )
        return uv, in_bounds

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "E": self.E.tolist(),
            "image_width": self.image_width,
            "image_height": self.image_height,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraModel":
        return CameraModel(
            np.array(d["K"]), np.array(d["E"]), d["image_width"], d["image_height"]
        )


def project_point(cam: CameraModel, p: Point3 | np.ndarray) -> PixelLocation:
    """Project one world point; behind-camera or out-of-bounds points are
    flagged invisible so consumers can substitute zero feature vectors."""
    arr = p.as_array() if isinstance(p, Point3) else np.asarray(p, dtype=np.float64)
    uv, vis = cam.project(arr[None, :])
    return PixelLocation(float(uv[0, 0]), float(uv[0, 1]), bool(vis[0]))
