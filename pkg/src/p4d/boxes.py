"""7-DOF detection boxes and corner helpers shared by the simulator,
the detector decode path, and the evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class DetectionBox:
    """Oriented 3D box: center (x, y, z), size (length, width, height),
    heading yaw about +y, classification score and class id.

    Length runs along the heading axis (+z rotated by yaw), width across it.
    """

    x: float
    y: float
    z: float
    length: float
    width: float
    height: float
    yaw: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"box dims must be positive, got "
                             f"({self.length}, {self.width}, {self.height})")
        if not math.isfinite(self.score):
            raise ValueError("box score must be finite")

    @property
    def range_xz(self) -> float:
        return math.hypot(self.x, self.z)

    def bev_corners(self) -> np.ndarray:
        """(4, 2) corners in the x-z plane, counter-clockwise."""
        return bev_corners(self.x, self.z, self.length, self.width, self.yaw)

    def corners_3d(self) -> np.ndarray:
        """(8, 3) box corners: bottom face then top face."""
        bev = self.bev_corners()
        lo = self.y - self.height / 2.0
        hi = self.y + self.height / 2.0
        bottom = np.column_stack([bev[:, 0], np.full(4, lo), bev[:, 1]])
        top = np.column_stack([bev[:, 0], np.full(4, hi), bev[:, 1]])
        return np.vstack([bottom, top])

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.length, self.width, self.height, self.yaw]
        )


def bev_corners(cx: float, cz: float, length: float, width: float, yaw: float) -> np.ndarray:
    """Corners of a rotated rectangle in the x-z plane (counter-clockwise).

    The local +z axis (length direction) points along the heading.
    """
    hw, hl = width / 2.0, length / 2.0
    local = np.array([[hw, hl], [-hw, hl], [-hw, -hl], [hw, -hl]])  # (x, z)
    c, s = math.cos(yaw), math.sin(yaw)
    # heading rotation about +y maps +z toward +x for positive yaw
    rot = np.array([[c, s], [-s, c]])  # applied to (x, z) row vectors
    world = local @ rot.T
    world[:, 0] += cx
    world[:, 1] += cz
    return world


def points_in_box(points: np.ndarray, box: DetectionBox, inflate: float = 0.0) -> np.ndarray:
    """Boolean mask of (N, 3) points inside the (optionally inflated) box."""
    p = np.asarray(points, dtype=float)
    rel = p - np.array([box.x, box.y, box.z])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * rel[:, 0] - s * rel[:, 2]
    lz = s * rel[:, 0] + c * rel[:, 2]
    return (
        (np.abs(lx) <= box.width / 2.0 + inflate)
        & (np.abs(lz) <= box.length / 2.0 + inflate)
        & (np.abs(rel[:, 1]) <= box.height / 2.0 + inflate)
    )
