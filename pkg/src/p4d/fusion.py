"""The multi-modal detection network.

Pillar features flow through a three-block 2D backbone; after each block,
features sampled from camera-tower feature pyramids are mixed by learned
connection weights and concatenated at pillar locations. Coarse maps are
brought back to the output grid by learned upsampling, and a per-cell head
predicts one vehicle logit plus seven box residuals for each anchor.

Camera fusion variants:
- projection: pillar centers are projected through each camera; the map
  feature at the landing pixel is sampled (nearest cell by default,
  bilinear behind a flag), summed across cameras that see the point, and
  combined across pyramid levels by connection weights. Pillars outside
  every camera's view contribute exact zeros.
- connection weights: `static` learns one softmax-normalized weight vector
  per fusion site; `dynamic` replaces it with a per-pillar softmax computed
  from the pillar's own backbone feature; mode None wires each site to its
  same-index pyramid level with uniform weights (no search).
- flatten / spatial_avg: geometry-free baselines that broadcast a single
  image-derived vector to every cell; no camera matrix is ever consulted.

Map-level adapters are linear (no bias) so an out-of-view zero sample stays
exactly zero through mixing and concatenation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorGrid, decode_residuals
from .autodiff import ParamSet, Tape, Tensor, max_relative_error, ops
from .boxes import DetectionBox
from .evaluation import bev_iou
from .geometry import CameraModel
from .pillars import (
    GridConfig,
    PillarTensor,
    featurize_and_scatter,
    init_point_featurizer,
    point_feature_dim,
)


@dataclass
class TowerConfig:
    kind: str = "still"  # "still" | "video"
    resolution: int = 96
    frames: int = 1
    channels: tuple[int, ...] = (8, 16, 32, 64)

    def __post_init__(self):
        if self.kind not in ("still", "video"):
            raise ValueError(f"unknown tower kind {self.kind!r}")
        if self.kind == "video" and self.frames < 4:
            raise ValueError("video towers need at least 4 frames")
        if self.kind == "still":
            self.frames = 1
        self.channels = tuple(self.channels)

    @property
    def block_count(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "resolution": self.resolution,
            "frames": self.frames,
            "channels": list(self.channels),
        }

    @staticmethod
    def from_dict(d: dict) -> "TowerConfig":
        return TowerConfig(d["kind"], d["resolution"], d["frames"], tuple(d["channels"]))


@dataclass
class FeatureMapPyramid:
    """Ordered 2D feature maps from one tower, shallow to deep."""

    maps: list[Tensor]
    downscales: list[int]  # per map, relative to the tower input

    def __post_init__(self):
        if len(self.maps) < 1:
            raise ValueError("a pyramid needs at least one map")
        if any(b > a for a, b in zip(self.downscales[1:], self.downscales[:-1])):
            raise ValueError("downscale factors must be non-decreasing")


@dataclass
class ModelConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    cloud_feature_dim: int = 2  # intensity + time indicator
    pseudo_channels: int = 16
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    backbone_repeats: tuple[int, ...] = (2, 2, 2)
    upsample_channels: int = 16
    fusion_width: int = 8
    flatten_channels: int = 4
    streams: list[TowerConfig] = field(default_factory=list)
    fusion_mode: str | None = None  # None | projection | flatten | spatial_avg
    connection_mode: str | None = None  # None | static | dynamic (projection only)
    bilinear_sampling: bool = False
    camera_native_resolution: int = 96

    def __post_init__(self):
        if self.fusion_mode not in (None, "projection", "flatten", "spatial_avg"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.connection_mode not in (None, "static", "dynamic"):
            raise ValueError(f"unknown connection mode {self.connection_mode!r}")
        if self.fusion_mode is not None and not self.streams:
            raise ValueError("camera fusion requires at least one stream")
        if len(self.backbone_channels) != len(self.backbone_repeats):
            raise ValueError("backbone channels and repeats must align")
        self.backbone_channels = tuple(self.backbone_channels)
        self.backbone_repeats = tuple(self.backbone_repeats)
        for s in self.streams:
            if self.camera_native_resolution % s.resolution != 0:
                raise ValueError(
                    f"stream resolution {s.resolution} must divide the native "
                    f"camera resolution {self.camera_native_resolution}"
                )

    @property
    def site_count(self) -> int:
        return len(self.backbone_channels)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "cloud_feature_dim": self.cloud_feature_dim,
            "pseudo_channels": self.pseudo_channels,
            "backbone_channels": list(self.backbone_channels),
            "backbone_repeats": list(self.backbone_repeats),
            "upsample_channels": self.upsample_channels,
            "fusion_width": self.fusion_width,
            "flatten_channels": self.flatten_channels,
            "streams": [s.to_dict() for s in self.streams],
            "fusion_mode": self.fusion_mode,
            "connection_mode": self.connection_mode,
            "bilinear_sampling": self.bilinear_sampling,
            "camera_native_resolution": self.camera_native_resolution,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            grid=GridConfig.from_dict(d["grid"]),
            cloud_feature_dim=d["cloud_feature_dim"],
            pseudo_channels=d["pseudo_channels"],
            backbone_channels=tuple(d["backbone_channels"]),
            backbone_repeats=tuple(d["backbone_repeats"]),
            upsample_channels=d["upsample_channels"],
            fusion_width=d["fusion_width"],
            flatten_channels=d["flatten_channels"],
            streams=[TowerConfig.from_dict(s) for s in d["streams"]],
            fusion_mode=d["fusion_mode"],
            connection_mode=d["connection_mode"],
            bilinear_sampling=d["bilinear_sampling"],
            camera_native_resolution=d["camera_native_resolution"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @staticmethod
    def load(path) -> "ModelConfig":
        return ModelConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class FrameSample:
    """One training/inference example, already in the target ego frame."""

    pillars: PillarTensor
    stream_inputs: list[list[np.ndarray]]  # [stream][camera] -> tower input
    rig: list[CameraModel]
    gt_boxes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# projection sampling


def project_to_map_cells(cam: CameraModel, centers: np.ndarray, downscale: float,
                         map_h: int, map_w: int):
    """Continuous map coordinates of projected points plus visibility."""
    uv, vis = cam.project(centers)
    mu = np.where(vis, uv[:, 0], 0.0) / downscale
    mv = np.where(vis, uv[:, 1], 0.0) / downscale
    mu = np.clip(mu, 0.0, map_w - 1e-6)
    mv = np.clip(mv, 0.0, map_h - 1e-6)
    return mv, mu, vis  # rows, cols, visible


def sample_projected_feature(fmap: np.ndarray, cam: CameraModel, center,
                             downscale: float, bilinear: bool = False) -> np.ndarray:
    """Feature vector for one 3D point from one map; zeros when the point
    is behind the camera or outside the image."""
    fmap = np.asarray(fmap)
    h, w, c = fmap.shape
    center = np.asarray(center, dtype=float).reshape(1, 3)
    rows, cols, vis = project_to_map_cells(cam, center, downscale, h, w)
    if not vis[0]:
        return np.zeros(c)
    if not bilinear:
        return fmap[int(rows[0]), int(cols[0])].astype(float)
    r = min(max(rows[0] - 0.5, 0.0), h - 1.0)
    q = min(max(cols[0] - 0.5, 0.0), w - 1.0)
    r0, q0 = int(r), int(q)
    r1, q1 = min(r0 + 1, h - 1), min(q0 + 1, w - 1)
    fr, fq = r - r0, q - q0
    return (
        fmap[r0, q0] * (1 - fr) * (1 - fq)
        + fmap[r1, q0] * fr * (1 - fq)
        + fmap[r0, q1] * (1 - fr) * fq
        + fmap[r1, q1] * fr * fq
    ).astype(float)


def multi_camera_feature(fmaps: list[np.ndarray], cams: list[CameraModel], center,
                         downscale: float, bilinear: bool = False) -> np.ndarray:
    """Per-camera samples added together; cameras that cannot see the point
    contribute nothing, and a point seen by no camera yields exact zeros."""
    total = np.zeros(np.asarray(fmaps[0]).shape[-1])
    for fmap, cam in zip(fmaps, cams):
        total = total + sample_projected_feature(fmap, cam, center, downscale, bilinear)
    return total


def _gather_candidate(tape, fmap: Tensor, cam: CameraModel, centers: np.ndarray,
                      downscale: float, bilinear: bool) -> Tensor:
    """Differentiable per-pillar sampling from one camera's map; invisible
    pillars receive exact zeros."""
    h, w, _ = fmap.value.shape
    rows, cols, vis = project_to_map_cells(cam, centers, downscale, h, w)
    mask = vis.astype(float)[:, None]
    if not bilinear:
        g = ops.gather_cells(tape, fmap, rows.astype(np.int64), cols.astype(np.int64))
        return ops.mul_constant(tape, g, mask)
    r = np.clip(rows - 0.5, 0.0, h - 1.0)
    q = np.clip(cols - 0.5, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    q0 = np.floor(q).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    fr = (r - r0)[:, None]
    fq = (q - q0)[:, None]
    corners = [
        (r0, q0, (1 - fr) * (1 - fq)),
        (r1, q0, fr * (1 - fq)),
        (r0, q1, (1 - fr) * fq),
        (r1, q1, fr * fq),
    ]
    total = None
    for rr, qq, wgt in corners:
        g = ops.mul_constant(tape, ops.gather_cells(tape, fmap, rr, qq), wgt * mask)
        total = g if total is None else ops.add(tape, total, g)
    return total


HEAD_INPUT_GAIN = 4.0  # feature scale entering the head; a larger initial
# normalization gain lets the class column reach decision-sized logits in
# far fewer optimizer steps under the heavily imbalanced anchor loss


# ---------------------------------------------------------------------------
# parameter initialization


def _conv_init(params: ParamSet, name: str, kh, kw, cin, cout, rng):
    scale = (2.0 / (kh * kw * cin)) ** 0.5
    return {
        "w": params.add(f"{name}.w", rng.normal(0.0, scale, (kh, kw, cin, cout))),
        "b": params.add(f"{name}.b", np.zeros(cout)),
        "gamma": params.add(f"{name}.gamma", np.ones(cout)),
        "beta": params.add(f"{name}.beta", np.zeros(cout)),
    }


def _tconv_init(params: ParamSet, name: str, stride, cin, cout, rng):
    scale = (2.0 / cin) ** 0.5
    return {
        "w": params.add(f"{name}.w", rng.normal(0.0, scale, (stride, stride, cin, cout))),
        "b": params.add(f"{name}.b", np.zeros(cout)),
        "gamma": params.add(f"{name}.gamma", np.ones(cout)),
        "beta": params.add(f"{name}.beta", np.zeros(cout)),
    }


def _time_conv_init(params: ParamSet, name: str, kt, cin, cout, rng):
    scale = (2.0 / (kt * cin)) ** 0.5
    return {
        "w": params.add(f"{name}.w", rng.normal(0.0, scale, (kt, cin, cout))),
        "b": params.add(f"{name}.b", np.zeros(cout)),
        "gamma": params.add(f"{name}.gamma", np.ones(cout)),
        "beta": params.add(f"{name}.beta", np.zeros(cout)),
    }


def _linear_init(params: ParamSet, name: str, cin, cout, rng, bias=True):
    scale = (2.0 / cin) ** 0.5
    out = {"w": params.add(f"{name}.w", rng.normal(0.0, scale, (cin, cout)))}
    if bias:
        out["b"] = params.add(f"{name}.b", np.zeros(cout))
    return out


def _conv_block(tape, x, p, stride):
    h = ops.conv2d(tape, x, p["w"], p["b"], stride=stride)
    h = ops.feature_norm(tape, h, p["gamma"], p["beta"])
    return ops.relu(tape, h)


def _time_block(tape, x, p, stride):
    h = ops.conv1d_time(tape, x, p["w"], p["b"], stride=stride)
    h = ops.feature_norm(tape, h, p["gamma"], p["beta"])
    return ops.relu(tape, h)


# ---------------------------------------------------------------------------
# the model


class Model:
    """Detection network assembled from a model config; parameters are
    created once (seeded) and shared across forward passes."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ParamSet()
        self.anchor_grid = AnchorGrid(config.grid)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
        c = config

        self._featurizer = init_point_featurizer(
            self.params, "pillar_feat",
            point_feature_dim(c.cloud_feature_dim), c.pseudo_channels, rng,
        )

        self._towers = []
        for si, stream in enumerate(c.streams):
            blocks = []
            cin = 3
            for bi, cout in enumerate(stream.channels):
                name = f"tower{si}.block{bi}"
                block = {"spatial": _conv_init(self.params, f"{name}.spatial", 3, 3, cin, cout, rng)}
                if stream.kind == "video" and bi < 2:
                    block["temporal"] = _time_conv_init(
                        self.params, f"{name}.temporal", 3, cout, cout, rng
                    )
                blocks.append(block)
                cin = cout
            self._towers.append(blocks)

        self._fused_extra = self._fusion_extra_channels()
        self._backbone = []
        cin = c.pseudo_channels
        for bi, (cout, reps) in enumerate(zip(c.backbone_channels, c.backbone_repeats)):
            stage = []
            for r in range(reps):
                stage.append(
                    _conv_init(
                        self.params, f"backbone.block{bi}.conv{r}", 3, 3,
                        cin if r == 0 else cout, cout, rng,
                    )
                )
            self._backbone.append(stage)
            cin = cout + self._fused_extra

        if c.fusion_mode == "projection":
            self._adapters = []  # [site][candidate] linear map to fusion width
            self._site_conn = []
            for site in range(c.site_count):
                site_adapters = []
                for si, level in self._site_candidates(site):
                    ch = c.streams[si].channels[level]
                    site_adapters.append(
                        _linear_init(
                            self.params, f"fuse.site{site}.s{si}l{level}",
                            ch, c.fusion_width, rng, bias=False,
                        )
                    )
                self._adapters.append(site_adapters)
                b = len(site_adapters)
                if c.connection_mode == "static":
                    self._site_conn.append(
                        self.params.add(f"conn.site{site}.w", np.zeros(b))
                    )
                elif c.connection_mode == "dynamic":
                    self._site_conn.append(
                        _linear_init(
                            self.params, f"conn.site{site}.omega",
                            c.backbone_channels[site], b, rng,
                        )
                    )
                else:
                    self._site_conn.append(None)
        elif c.fusion_mode == "spatial_avg":
            self._adapters = []
            for site in range(c.site_count):
                site_adapters = [
                    _linear_init(
                        self.params, f"avg.site{site}.s{si}",
                        stream.channels[min(site, stream.block_count - 1)],
                        c.fusion_width, rng, bias=False,
                    )
                    for si, stream in enumerate(c.streams)
                ]
                self._adapters.append(site_adapters)
        elif c.fusion_mode == "flatten":
            self._flatten_adapters = [
                _linear_init(
                    self.params, f"flatten.s{si}", stream.channels[-1],
                    c.flatten_channels, rng, bias=False,
                )
                for si, stream in enumerate(c.streams)
            ]

        self._deconvs = []
        for bi, cout in enumerate(c.backbone_channels):
            stride = 2 ** (bi + 1)
            self._deconvs.append(
                _tconv_init(
                    self.params, f"up{bi}", stride, cout + self._fused_extra,
                    c.upsample_channels, rng,
                )
            )
        # stride-1 lateral path from the pseudo-image to the head: keeps
        # full-resolution per-cell evidence that the strided blocks lose
        self._lateral = _linear_init(
            self.params, "lateral", c.pseudo_channels, c.upsample_channels, rng
        )
        self._lateral["gamma"] = self.params.add(
            "lateral.gamma", np.full(c.upsample_channels, HEAD_INPUT_GAIN)
        )
        self._lateral["beta"] = self.params.add("lateral.beta", np.zeros(c.upsample_channels))
        for up in self._deconvs:
            up["gamma"].value[:] = HEAD_INPUT_GAIN

        head_in = c.upsample_channels * (c.site_count + 1)
        a = self.anchor_grid.anchors_per_cell
        self._head = _linear_init(self.params, "head", head_in, a * 8, rng)
        # near-zero head weights: the first steps then produce small,
        # well-scaled gradients instead of a huge transient that poisons
        # the optimizer's second-moment estimate for hundreds of steps
        self._head["w"].value *= 0.02
        self.dtype = np.float64
        # start detection scores near zero probability so early training is
        # not dominated by sea-of-negatives gradients
        head_bias = self._head["b"].value
        head_bias[:a] = -4.0

    def astype(self, dtype) -> "Model":
        """Switch compute precision; float32 roughly halves step time."""
        self.dtype = np.dtype(dtype).type
        self.params.astype(self.dtype)
        return self

    # -- candidate bookkeeping

    def _fusion_extra_channels(self) -> int:
        c = self.config
        if c.fusion_mode is None:
            return 0
        if c.fusion_mode == "projection":
            return c.fusion_width
        if c.fusion_mode == "spatial_avg":
            return c.fusion_width * len(c.streams)
        total = 0  # flatten: adapted final map, per stream
        for s in c.streams:
            final = s.resolution // (2 ** s.block_count)
            total += final * final * c.flatten_channels
        return total

    def _site_candidates(self, site: int) -> list[tuple[int, int]]:
        """(stream_idx, level) pairs feeding one fusion site."""
        c = self.config
        out = []
        for si, stream in enumerate(c.streams):
            if c.connection_mode is None:
                out.append((si, min(site, stream.block_count - 1)))
            else:
                out.extend((si, level) for level in range(stream.block_count))
        return out

    def candidate_count(self, site: int) -> int:
        return len(self._site_candidates(site))

    # -- tower forward

    def tower_forward(self, tape, stream_idx: int, image: np.ndarray) -> FeatureMapPyramid:
        stream = self.config.streams[stream_idx]
        blocks = self._towers[stream_idx]
        expect = (
            (stream.frames, stream.resolution, stream.resolution, 3)
            if stream.kind == "video"
            else (stream.resolution, stream.resolution, 3)
        )
        if image.shape != expect:
            raise ValueError(
                f"stream {stream_idx} expects input {expect}, got {image.shape}"
            )
        x = Tensor(np.asarray(image, dtype=self.dtype))
        maps = []
        downs = []
        scale = 1
        for bi, block in enumerate(blocks):
            x = _conv_block(tape, x, block["spatial"], stride=2)
            scale *= 2
            if "temporal" in block:
                x = _time_block(tape, x, block["temporal"], stride=2)
                if bi == 1:  # time pooled away after the second block
                    x = ops.mean_over_axes(tape, x, (0,))
            if x.value.ndim == 4:
                maps.append(ops.mean_over_axes(tape, x, (0,)))
            else:
                maps.append(x)
            downs.append(scale)
        return FeatureMapPyramid(maps, downs)

    # -- fusion

    def _projection_fusion(self, tape, site, m, pyramids, sample, aux):
        c = self.config
        p = sample.pillars.num_pillars
        centers = sample.pillars.centers[:p]
        cells = sample.pillars.cell_indices[:p]
        stride = 2 ** (site + 1)
        gx = c.grid.grid_x // stride
        gz = c.grid.grid_z // stride
        if p == 0:
            zeros = Tensor(np.zeros((gx, gz, c.fusion_width), dtype=m.value.dtype))
            return ops.concat(tape, [m, zeros], axis=-1)

        native = c.camera_native_resolution
        cands = []
        for k, (si, level) in enumerate(self._site_candidates(site)):
            stream = c.streams[si]
            fmap_scale = stream.resolution / native  # tower input vs camera pixels
            total = None
            for cam_idx, cam in enumerate(sample.rig):
                fmap = pyramids[si][cam_idx].maps[level]
                downscale = pyramids[si][cam_idx].downscales[level] / fmap_scale
                g = _gather_candidate(
                    tape, fmap, cam, centers, downscale, c.bilinear_sampling
                )
                total = g if total is None else ops.add(tape, total, g)
            adapter = self._adapters[site][k]
            cands.append(ops.affine(tape, total, adapter["w"]))

        feats = ops.stack(tape, cands)  # (B, P, Wf)
        b = len(cands)
        if c.connection_mode == "static":
            weights = ops.softmax(tape, self._site_conn[site], axis=-1)
            fused = ops.mix_static(tape, feats, weights)
            aux["connection_weights"][site] = weights.value.copy()
        elif c.connection_mode == "dynamic":
            cell_feats = ops.gather_cells(
                tape, m, cells[:, 0] // stride, cells[:, 1] // stride
            )
            conn = self._site_conn[site]
            logits = ops.affine(tape, cell_feats, conn["w"], conn["b"])
            weights = ops.softmax(tape, logits, axis=-1)
            fused = ops.mix_dynamic(tape, feats, weights)
            aux["connection_weights"][site] = weights.value.copy()
        else:
            uniform = Tensor(np.full(b, 1.0 / b, dtype=feats.value.dtype))
            fused = ops.mix_static(tape, feats, uniform)
            aux["connection_weights"][site] = uniform.value.copy()

        scattered = ops.scatter_mean(
            tape, fused, cells[:, 0] // stride, cells[:, 1] // stride, gx, gz
        )
        return ops.concat(tape, [m, scattered], axis=-1)

    def _broadcast_fusion(self, tape, site, m, vec):
        h, w, _ = m.value.shape
        tiled = ops.tile_to_map(tape, vec, h, w)
        return ops.concat(tape, [m, tiled], axis=-1)

    def _spatial_avg_vector(self, tape, site, pyramids):
        parts = []
        for si, stream in enumerate(self.config.streams):
            level = min(site, stream.block_count - 1)
            adapter = self._adapters[site][si]
            per_cam = None
            for cam_idx in range(len(pyramids[si])):
                fmap = pyramids[si][cam_idx].maps[level]
                pooled = ops.mean_over_axes(tape, fmap, (0, 1))
                per_cam = pooled if per_cam is None else ops.add(tape, per_cam, pooled)
            per_cam = ops.scale(tape, per_cam, 1.0 / len(pyramids[si]))
            parts.append(ops.affine(tape, ops.reshape(tape, per_cam, (1, -1)), adapter["w"]))
        flat = ops.concat(tape, parts, axis=-1)
        return ops.reshape(tape, flat, (flat.value.shape[-1],))

    def _flatten_vector(self, tape, pyramids):
        parts = []
        for si, stream in enumerate(self.config.streams):
            adapter = self._flatten_adapters[si]
            per_cam = None
            for cam_idx in range(len(pyramids[si])):
                fmap = pyramids[si][cam_idx].maps[-1]
                small = ops.affine(tape, fmap, adapter["w"])
                flat = ops.reshape(tape, small, (1, -1))
                per_cam = flat if per_cam is None else ops.add(tape, per_cam, flat)
            per_cam = ops.scale(tape, per_cam, 1.0 / len(pyramids[si]))
            parts.append(per_cam)
        flat = ops.concat(tape, parts, axis=-1)
        return ops.reshape(tape, flat, (flat.value.shape[-1],))

    # -- full forward

    def forward(self, sample: FrameSample, tape: Tape | None = None):
        """Returns (logits (gx, gz, A), residuals (gx, gz, A, 7), aux)."""
        c = self.config
        aux = {"connection_weights": {}, "pyramids": None}

        pseudo = featurize_and_scatter(tape, sample.pillars, self._featurizer, c.grid)

        pyramids = None
        if c.fusion_mode is not None:
            if len(sample.stream_inputs) != len(c.streams):
                raise ValueError(
                    f"sample provides {len(sample.stream_inputs)} streams, "
                    f"model expects {len(c.streams)}"
                )
            pyramids = [
                [
                    self.tower_forward(tape, si, img)
                    for img in sample.stream_inputs[si]
                ]
                for si in range(len(c.streams))
            ]
            aux["pyramids"] = pyramids
        if c.fusion_mode == "projection" and len(sample.rig) == 0:
            raise ValueError("projection fusion requires a camera rig")

        flat_vec = None
        if c.fusion_mode == "flatten":
            flat_vec = self._flatten_vector(tape, pyramids)

        x = pseudo
        fused_maps = []
        for site, stage in enumerate(self._backbone):
            for r, conv in enumerate(stage):
                x = _conv_block(tape, x, conv, stride=2 if r == 0 else 1)
            if c.fusion_mode == "projection":
                x = self._projection_fusion(tape, site, x, pyramids, sample, aux)
            elif c.fusion_mode == "spatial_avg":
                x = self._broadcast_fusion(
                    tape, site, x, self._spatial_avg_vector(tape, site, pyramids)
                )
            elif c.fusion_mode == "flatten":
                x = self._broadcast_fusion(tape, site, x, flat_vec)
            fused_maps.append(x)
        aux["backbone_maps"] = [fm.value for fm in fused_maps]

        # head inputs are normalized but not rectified: zero-mean channels
        # keep the many negative anchors from fighting the few positives
        # through the shared feature means
        lat = ops.affine(tape, pseudo, self._lateral["w"], self._lateral["b"])
        ups = [ops.feature_norm(tape, lat, self._lateral["gamma"], self._lateral["beta"])]
        for bi, fm in enumerate(fused_maps):
            p = self._deconvs[bi]
            u = ops.conv_transpose(tape, fm, p["w"], p["b"], stride=2 ** (bi + 1))
            ups.append(ops.feature_norm(tape, u, p["gamma"], p["beta"]))
        merged = ops.concat(tape, ups, axis=-1)

        head = ops.affine(tape, merged, self._head["w"], self._head["b"])
        a = self.anchor_grid.anchors_per_cell
        logits = ops.slice_channels(tape, head, 0, a)
        residuals = ops.reshape(
            tape,
            ops.slice_channels(tape, head, a, a * 8),
            (c.grid.grid_x, c.grid.grid_z, a, 7),
        )
        return logits, residuals, aux


# ---------------------------------------------------------------------------
# decoding


def decode_and_nms(logits: np.ndarray, residuals: np.ndarray, anchors: AnchorGrid,
                   iou_threshold: float = 0.5, score_threshold: float = 0.4,
                   max_length: float = 30.0, max_width: float = 5.0,
                   min_side: float = 0.5) -> list[DetectionBox]:
    """Decode residuals against the anchor grid, apply the probability and
    size filters, then greedy top-down NMS with rotated-box IoU (score ties
    broken by lower cell index)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    scores = ops.sigmoid(np.asarray(logits, dtype=float))
    anchor_arr = anchors.boxes_array()
    gx, gz, a = scores.shape
    flat_scores = scores.reshape(-1)
    keep = np.nonzero(flat_scores >= score_threshold)[0]
    if len(keep) == 0:
        return []
    decoded = decode_residuals(
        residuals.reshape(-1, 7)[keep], anchor_arr.reshape(-1, 7)[keep], anchors.diag
    )
    boxes = []
    for cell_index, row, score in zip(keep, decoded, flat_scores[keep]):
        l, w, h = row[3], row[4], row[5]
        if l > max_length or w > max_width:
            continue
        if l < min_side or w < min_side or h < min_side:
            continue
        boxes.append(
            (float(score), int(cell_index),
             DetectionBox(row[0], row[1], row[2], l, w, h, row[6], float(score)))
        )
    boxes.sort(key=lambda t: (-t[0], t[1]))
    kept: list[DetectionBox] = []
    for _, _, cand in boxes:
        if all(bev_iou(cand, k) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# composed-layer gradient verification


def fusion_layer_gradient_check(trials: int = 3, seed: int = 0) -> float:
    """Finite-difference check of one complete connection-fusion layer:
    adapters, gather, softmax weighting (static and dynamic), mixing and
    concatenation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        p, b, cw, cm = 5, 3, 4, 6
        params = ParamSet()
        maps = [Tensor(rng.normal(size=(4, 4, cw))) for _ in range(b)]
        m_cells = Tensor(rng.normal(size=(p, cm)))
        adapters = [
            params.add(f"adapt{i}", rng.normal(size=(cw, 3)) * 0.5) for i in range(b)
        ]
        w_static = params.add("w", rng.normal(size=b))
        omega_w = params.add("omega.w", rng.normal(size=(cm, b)) * 0.5)
        omega_b = params.add("omega.b", rng.normal(size=b) * 0.1)
        rows = rng.integers(0, 4, size=p)
        cols = rng.integers(0, 4, size=p)
        vis = (rng.random((p, 1)) > 0.3).astype(float)
        proj = rng.normal(size=(p, cm + 6))
        dynamic = trial % 2 == 0

        def run(tape):
            cands = []
            for i in range(b):
                g = ops.gather_cells(tape, maps[i], rows, cols)
                g = ops.mul_constant(tape, g, vis)
                cands.append(ops.affine(tape, g, adapters[i]))
            feats = ops.stack(tape, cands)
            if dynamic:
                logits = ops.affine(tape, m_cells, omega_w, omega_b)
                weights = ops.softmax(tape, logits, axis=-1)
                fused = ops.mix_dynamic(tape, feats, weights)
            else:
                weights = ops.softmax(tape, w_static, axis=-1)
                fused = ops.mix_static(tape, feats, weights)
            out = ops.concat(tape, [m_cells, fused, fused], axis=-1)
            flat = ops.reshape(tape, out, (1, -1))
            return ops.reshape(
                tape, ops.affine(tape, flat, Tensor(proj.reshape(-1, 1))), ()
            )

        leaves = params.tensors() + maps + [m_cells]
        worst = max(worst, max_relative_error(run, leaves))
    return worst
