"""Temporal point-cloud accumulation and pillar encoding.

Multiple scanner sweeps are aligned into the newest frame's ego coordinates
(removing ego motion), each point gains a trailing time-indicator feature
(seconds relative to the newest frame, so t <= 0), and the merged cloud is
grouped into a fixed-budget pillar tensor. The tensor always materializes
(max_pillars, N, F), so downstream compute is identical whether one sweep
or thirty-two were accumulated; when a cell holds more than N points,
exactly N are drawn without replacement by a seeded generator, which
thins dense regions while keeping sparse far-range cells intact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, Tape, Tensor
from .autodiff import ops
from .geometry import RigidTransform
from .simworld import PointCloudFrame


@dataclass
class TimedPointCloud:
    points: np.ndarray  # (M, 3) in the target ego frame
    features: np.ndarray  # (M, F); last column is the time indicator t <= 0

    def __post_init__(self):
        if len(self.points) != len(self.features):
            raise ValueError("points and features must align")


@dataclass
class GridConfig:
    """Pillar grid over the x-z plane.

    The defaults are the compact configuration used by the unit suites;
    training harnesses override the ranges to cover the full far-range
    extent of the synthetic world.
    """

    x_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-2.0, 4.0)
    grid_x: int = 64
    grid_z: int = 64
    max_points_per_pillar: int = 128
    max_pillars: int = 2000

    def __post_init__(self):
        if self.grid_x <= 0 or self.grid_z <= 0:
            raise ValueError("grid extents must be positive")
        if self.max_points_per_pillar <= 0 or self.max_pillars <= 0:
            raise ValueError("point and pillar budgets must be positive")
        for lo, hi in (self.x_range, self.z_range, self.y_range):
            if hi <= lo:
                raise ValueError("ranges must be non-degenerate")

    @property
    def cell_size_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.grid_x

    @property
    def cell_size_z(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.grid_z

    def cell_center(self, ix: np.ndarray, iz: np.ndarray):
        x = self.x_range[0] + (np.asarray(ix) + 0.5) * self.cell_size_x
        z = self.z_range[0] + (np.asarray(iz) + 0.5) * self.cell_size_z
        return x, z

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "z_range": list(self.z_range),
            "y_range": list(self.y_range),
            "grid_x": self.grid_x,
            "grid_z": self.grid_z,
            "max_points_per_pillar": self.max_points_per_pillar,
            "max_pillars": self.max_pillars,
        }

    @staticmethod
    def from_dict(d: dict) -> "GridConfig":
        return GridConfig(
            x_range=tuple(d["x_range"]),
            z_range=tuple(d["z_range"]),
            y_range=tuple(d["y_range"]),
            grid_x=d["grid_x"],
            grid_z=d["grid_z"],
            max_points_per_pillar=d["max_points_per_pillar"],
            max_pillars=d["max_pillars"],
        )


@dataclass
class PillarTensor:
    """Fixed-size grouped representation.

    values is always (max_pillars, N, F) with zero padding beyond both the
    per-pillar point count and the pillar count; rows beyond num_pillars
    carry cell index (-1, -1). F stacks [x, y, z, *point features].
    """

    values: np.ndarray
    counts: np.ndarray
    centers: np.ndarray
    cell_indices: np.ndarray
    num_pillars: int
    grid: GridConfig

    @property
    def nbytes(self) -> int:
        return (
            self.values.nbytes
            + self.counts.nbytes
            + self.centers.nbytes
            + self.cell_indices.nbytes
        )


def accumulate(frames: list[PointCloudFrame], target_pose: RigidTransform,
               frame_dt: float = 0.1) -> TimedPointCloud:
    """Merge sweeps into the target (newest) ego frame with a time feature.

    Each point is mapped through invert(target_pose) composed with its own
    frame's pose, so static structure from different sweeps lands on top of
    itself; the appended indicator is (frame_index - last_index) * frame_dt.
    """
    if not frames:
        raise ValueError("accumulate needs at least one frame")
    inv_target = target_pose.invert()
    last_index = frames[-1].timestamp_index
    pts_out = []
    feats_out = []
    for fr in frames:
        rel = inv_target.compose(fr.ego_pose)
        pts_out.append(rel.apply(fr.points) if len(fr.points) else fr.points.reshape(0, 3))
        t = (fr.timestamp_index - last_index) * frame_dt
        feats_out.append(
            np.concatenate([fr.features, np.full((len(fr.points), 1), t)], axis=1)
        )
    return TimedPointCloud(np.vstack(pts_out), np.vstack(feats_out))


def pillarize(cloud: TimedPointCloud, grid: GridConfig, seed: int) -> PillarTensor:
    """Group points into grid cells under the fixed (max_pillars, N) budget.

    Points outside the configured ranges are dropped. Cells over the point
    budget are subsampled without replacement (seeded); cells beyond the
    pillar budget are dropped keeping the highest-count cells, ties broken
    by (ix, iz) lexicographic order. The pillar center is the mean of the
    retained points.
    """
    n_slot = grid.max_points_per_pillar
    feat_dim = 3 + cloud.features.shape[1]
    values = np.zeros((grid.max_pillars, n_slot, feat_dim))
    counts = np.zeros(grid.max_pillars, dtype=np.int64)
    centers = np.zeros((grid.max_pillars, 3))
    cells = np.full((grid.max_pillars, 2), -1, dtype=np.int64)

    pts = cloud.points
    if len(pts) == 0:
        return PillarTensor(values, counts, centers, cells, 0, grid)

    in_range = (
        (pts[:, 0] >= grid.x_range[0]) & (pts[:, 0] < grid.x_range[1])
        & (pts[:, 2] >= grid.z_range[0]) & (pts[:, 2] < grid.z_range[1])
        & (pts[:, 1] >= grid.y_range[0]) & (pts[:, 1] < grid.y_range[1])
    )
    pts = pts[in_range]
    feats = cloud.features[in_range]
    if len(pts) == 0:
        return PillarTensor(values, counts, centers, cells, 0, grid)

    ix = ((pts[:, 0] - grid.x_range[0]) / grid.cell_size_x).astype(np.int64)
    iz = ((pts[:, 2] - grid.z_range[0]) / grid.cell_size_z).astype(np.int64)
    cell_id = ix * grid.grid_z + iz

    # one pooled draw per cell: ordering by a random key inside each cell
    # makes "take the first N" a uniform draw without replacement
    rng = np.random.default_rng(seed)
    keys = rng.random(len(pts))
    order = np.lexsort((keys, cell_id))
    cell_sorted = cell_id[order]
    uniq, starts, cell_counts = np.unique(cell_sorted, return_index=True, return_counts=True)

    keep = np.arange(len(uniq))
    if len(uniq) > grid.max_pillars:
        ux, uz = uniq // grid.grid_z, uniq % grid.grid_z
        priority = np.lexsort((uz, ux, -cell_counts))
        keep = np.sort(priority[: grid.max_pillars])

    kept_starts = starts[keep]
    kept_counts = np.minimum(cell_counts[keep], n_slot)
    p = len(keep)

    total = int(kept_counts.sum())
    seg_offsets = np.repeat(np.cumsum(kept_counts) - kept_counts, kept_counts)
    within = np.arange(total) - seg_offsets
    src_rows = order[np.repeat(kept_starts, kept_counts) + within]
    pillar_of_row = np.repeat(np.arange(p), kept_counts)

    stacked = np.concatenate([pts, feats], axis=1)
    values[pillar_of_row, within] = stacked[src_rows]
    counts[:p] = kept_counts
    centers[:p] = values[:p, :, :3].sum(axis=1) / kept_counts[:, None]
    cells[:p, 0] = uniq[keep] // grid.grid_z
    cells[:p, 1] = uniq[keep] % grid.grid_z
    return PillarTensor(values, counts, centers, cells, p, grid)


def init_point_featurizer(params: ParamSet, prefix: str, in_dim: int, out_dim: int,
                          rng: np.random.Generator) -> dict[str, Tensor]:
    scale = (2.0 / in_dim) ** 0.5
    return {
        "w": params.add(f"{prefix}.w", rng.normal(0.0, scale, (in_dim, out_dim))),
        "b": params.add(f"{prefix}.b", np.zeros(out_dim)),
        "gamma": params.add(f"{prefix}.gamma", np.ones(out_dim)),
        "beta": params.add(f"{prefix}.beta", np.zeros(out_dim)),
    }


def point_feature_dim(cloud_feature_dim: int) -> int:
    """Featurizer input width: three center offsets, three scaled
    coordinates, then the cloud's own per-point features."""
    return 6 + cloud_feature_dim


def packed_point_features(pillars: PillarTensor, grid: GridConfig):
    """Derive the per-point featurizer input for the valid slots only.

    Returns (rows (R, 8), segment_starts (P+1,)). Columns: center offsets
    with the planar ones normalized by the cell size, planar coordinates
    scaled by the grid half-extent, raw height, then the point's own
    features. Height and intensity stay at meter/unit scale so the
    car-versus-ground evidence is not drowned by positional spread.
    """
    p = pillars.num_pillars
    counts = pillars.counts[:p]
    slot = np.arange(grid.max_points_per_pillar)
    mask = slot[None, :] < counts[:, None]
    vals = pillars.values[:p][mask]  # (R, F) packed valid rows
    centers = np.repeat(pillars.centers[:p], counts, axis=0)
    sx = max(abs(grid.x_range[0]), abs(grid.x_range[1]))
    sz = max(abs(grid.z_range[0]), abs(grid.z_range[1]))
    rows = np.column_stack(
        [
            (vals[:, 0] - centers[:, 0]) / grid.cell_size_x,
            vals[:, 1] - centers[:, 1],
            (vals[:, 2] - centers[:, 2]) / grid.cell_size_z,
            vals[:, 0] / sx,
            vals[:, 1],
            vals[:, 2] / sz,
            vals[:, 3:],
        ]
    )
    starts = np.concatenate([[0], np.cumsum(counts)])
    return rows, starts


def featurize_and_scatter(tape: Tape | None, pillars: PillarTensor,
                          weights: dict[str, Tensor], grid: GridConfig) -> Tensor:
    """Per-point affine + feature normalization + ReLU, max-pooled per
    pillar and scattered back to the (grid_x, grid_z, C) pseudo-image.

    Cells without a pillar stay exactly zero. Differentiable with respect
    to the featurizer weights and the point features.
    """
    out_dim = weights["w"].value.shape[1]
    if pillars.num_pillars == 0:
        return Tensor(
            np.zeros((grid.grid_x, grid.grid_z, out_dim), dtype=weights["w"].value.dtype)
        )
    rows, starts = packed_point_features(pillars, grid)
    x = Tensor(rows.astype(weights["w"].value.dtype, copy=False))
    h = ops.affine(tape, x, weights["w"], weights["b"])
    h = ops.feature_norm(tape, h, weights["gamma"], weights["beta"])
    h = ops.relu(tape, h)
    pooled = ops.segment_max(tape, h, starts)  # (P, C)
    p = pillars.num_pillars
    return ops.scatter_rows(
        tape, pooled, pillars.cell_indices[:p, 0], pillars.cell_indices[:p, 1],
        grid.grid_x, grid.grid_z,
    )


def density_profile(cloud: TimedPointCloud, bin_edges: list[float],
                    cell_size: float = 1.0) -> np.ndarray:
    """Mean points per occupied square cell, bucketed by cell-center range
    in the x-z plane; bins with no occupied cell report zero."""
    edges = np.asarray(bin_edges, dtype=float)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be increasing with at least two entries")
    out = np.zeros(len(edges) - 1)
    if len(cloud.points) == 0:
        return out
    x, z = cloud.points[:, 0], cloud.points[:, 2]
    ix = np.floor(x / cell_size).astype(np.int64)
    iz = np.floor(z / cell_size).astype(np.int64)
    key = (ix - ix.min()) * (iz.max() - iz.min() + 1) + (iz - iz.min())
    uniq, cnt = np.unique(key, return_counts=True)
    ux = uniq // (iz.max() - iz.min() + 1) + ix.min()
    uz = uniq % (iz.max() - iz.min() + 1) + iz.min()
    cx = (ux + 0.5) * cell_size
    cz = (uz + 0.5) * cell_size
    r = np.hypot(cx, cz)
    which = np.digitize(r, edges) - 1
    for b in range(len(edges) - 1):
        sel = which == b
        if sel.any():
            out[b] = cnt[sel].mean()
    return out


def write_density_csv(path: str | Path,
                      profiles: dict[int, np.ndarray], bin_edges: list[float]) -> None:
    """CSV rows: range_bin_low, range_bin_high, frames_accumulated,
    mean_points_per_cell. `profiles` maps frame count -> profile."""
    edges = list(bin_edges)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["range_bin_low", "range_bin_high", "frames_accumulated", "mean_points_per_cell"]
        )
        for frames, profile in sorted(profiles.items()):
            for lo, hi, val in zip(edges[:-1], edges[1:], profile):
                writer.writerow([lo, hi, frames, f"{val:.6f}"])
