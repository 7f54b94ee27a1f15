"""Anchor grid and box residual encoding.

Two fixed-size anchors per output cell, at headings 0 and 45 degrees.
Residuals are (dx, dy, dz, dl, dw, dh, dyaw): planar offsets normalized by
the anchor's top-down diagonal, the vertical offset by the anchor height,
sizes as log ratios, and the heading as sin(delta yaw) so decode inverts
with arcsin against the matched anchor's rotation bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import DetectionBox
from .pillars import GridConfig

ANCHOR_SIZE = (4.7, 2.1, 1.7)  # length, width, height (meters)
ANCHOR_YAWS = (0.0, math.pi / 4.0)
RESIDUAL_DIM = 7


@dataclass
class AnchorGrid:
    grid: GridConfig
    size: tuple[float, float, float] = ANCHOR_SIZE
    yaws: tuple[float, float] = ANCHOR_YAWS
    y_center: float = ANCHOR_SIZE[2] / 2.0

    @property
    def anchors_per_cell(self) -> int:
        return len(self.yaws)

    @property
    def diag(self) -> float:
        return math.hypot(self.size[0], self.size[1])

    def boxes_array(self) -> np.ndarray:
        """(grid_x, grid_z, A, 7) anchor parameters (x, y, z, l, w, h, yaw)."""
        g = self.grid
        ix, iz = np.meshgrid(np.arange(g.grid_x), np.arange(g.grid_z), indexing="ij")
        cx, cz = g.cell_center(ix, iz)
        a = self.anchors_per_cell
        out = np.zeros((g.grid_x, g.grid_z, a, 7))
        out[..., 0] = cx[..., None]
        out[..., 1] = self.y_center
        out[..., 2] = cz[..., None]
        out[..., 3] = self.size[0]
        out[..., 4] = self.size[1]
        out[..., 5] = self.size[2]
        out[..., 6] = np.asarray(self.yaws)
        return out


def encode_residuals(gt: np.ndarray, anchor: np.ndarray, diag: float) -> np.ndarray:
    """Residual 7-vector(s) of ground-truth box rows against anchor rows."""
    gt = np.atleast_2d(gt)
    anchor = np.atleast_2d(anchor)
    out = np.empty((len(gt), RESIDUAL_DIM))
    out[:, 0] = (gt[:, 0] - anchor[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - anchor[:, 1]) / anchor[:, 5]
    out[:, 2] = (gt[:, 2] - anchor[:, 2]) / diag
    out[:, 3] = np.log(gt[:, 3] / anchor[:, 3])
    out[:, 4] = np.log(gt[:, 4] / anchor[:, 4])
    out[:, 5] = np.log(gt[:, 5] / anchor[:, 5])
    out[:, 6] = np.sin(gt[:, 6] - anchor[:, 6])
    return out


def decode_residuals(residuals: np.ndarray, anchor: np.ndarray, diag: float) -> np.ndarray:
    """Inverse of encode_residuals (rows of 7-vectors)."""
    residuals = np.atleast_2d(residuals)
    anchor = np.atleast_2d(anchor)
    out = np.empty_like(residuals)
    out[:, 0] = anchor[:, 0] + residuals[:, 0] * diag
    out[:, 1] = anchor[:, 1] + residuals[:, 1] * anchor[:, 5]
    out[:, 2] = anchor[:, 2] + residuals[:, 2] * diag
    out[:, 3] = anchor[:, 3] * np.exp(residuals[:, 3])
    out[:, 4] = anchor[:, 4] * np.exp(residuals[:, 4])
    out[:, 5] = anchor[:, 5] * np.exp(residuals[:, 5])
    out[:, 6] = anchor[:, 6] + np.arcsin(np.clip(residuals[:, 6], -1.0, 1.0))
    return out


def box_to_array(box: DetectionBox) -> np.ndarray:
    return box.as_array()
