"""Anchor assignment, loss, augmentation, and the training loop.

Anchors match ground truth by top-down rotated IoU: 0.6 and above is
positive, below 0.45 negative, in between ignored; every ground-truth box
additionally force-matches its best anchor so nothing goes unsupervised.
The loss is mean binary cross-entropy over positive+negative anchors plus
a weighted mean squared error on the positives' residuals.

Point-cloud augmentation (mirror across x with probability one half, then
a global yaw rotation drawn from +-45 degrees) is applied to the
accumulated cloud, the ground-truth boxes, and every camera's extrinsic
matrix together, so projections of transformed points through the updated
cameras reproduce the original pixels exactly. Images are left untouched.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorGrid, encode_residuals
from .autodiff import Adam, ParamSet, SgdMomentum, Tape, Tensor, ops, save_checkpoint
from .boxes import DetectionBox
from .evaluation import bev_iou
from .fusion import FrameSample, Model, ModelConfig
from .geometry import CameraModel, RigidTransform
from .pillars import TimedPointCloud, accumulate, pillarize
from .simworld import (
    Scene,
    build_image_tensor,
    ground_truth_boxes,
    load_scene,
    read_manifest,
    rng_for,
    simulate_lidar_frame,
)

REGRESSION_WEIGHT = 2.0  # classification-to-regression balance in the loss


@dataclass
class TrainConfig:
    steps: int = 3000
    warmup_steps: int = 150
    batch_size: int = 4
    base_lr: float = 0.0015
    seed: int = 0
    frames: int = 16  # accumulated sweeps per sample
    augment: bool = True
    optimizer: str = "adam"  # adam | sgd
    dtype: str = "float64"
    dataset_dir: str | None = None
    split: str = "train"

    def __post_init__(self):
        if not self.steps > self.warmup_steps >= 0:
            raise ValueError("need steps > warmup_steps >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @staticmethod
    def load(path) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# anchor matching


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (gx, gz, A) int8: 1 positive, 0 negative, -1 ignore
    residuals: np.ndarray  # (gx, gz, A, 7), valid where label == 1

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels == 1

    @property
    def classified_mask(self) -> np.ndarray:
        return self.labels >= 0


POSITIVE_IOU = 0.6
NEGATIVE_IOU = 0.45


def match_anchors(anchors: AnchorGrid, gts: list[DetectionBox]) -> AnchorTargets:
    grid = anchors.grid
    a = anchors.anchors_per_cell
    labels = np.zeros((grid.grid_x, grid.grid_z, a), dtype=np.int8)
    residuals = np.zeros((grid.grid_x, grid.grid_z, a, 7))
    if not gts:
        return AnchorTargets(labels, residuals)

    anchor_arr = anchors.boxes_array()
    best_iou = np.zeros((grid.grid_x, grid.grid_z, a))
    assigned = np.full((grid.grid_x, grid.grid_z, a), -1, dtype=np.int64)

    for gi, gt in enumerate(gts):
        radius = (anchors.diag + math.hypot(gt.length, gt.width)) / 2.0
        ix_lo = max(int((gt.x - radius - grid.x_range[0]) / grid.cell_size_x), 0)
        ix_hi = min(int((gt.x + radius - grid.x_range[0]) / grid.cell_size_x) + 1, grid.grid_x)
        iz_lo = max(int((gt.z - radius - grid.z_range[0]) / grid.cell_size_z), 0)
        iz_hi = min(int((gt.z + radius - grid.z_range[0]) / grid.cell_size_z) + 1, grid.grid_z)
        gt_best, gt_best_idx = 0.0, None
        for ix in range(ix_lo, ix_hi):
            for iz in range(iz_lo, iz_hi):
                for ai in range(a):
                    arow = anchor_arr[ix, iz, ai]
                    anchor_box = DetectionBox(
                        arow[0], arow[1], arow[2], arow[3], arow[4], arow[5], arow[6]
                    )
                    iou = bev_iou(anchor_box, gt)
                    if iou > best_iou[ix, iz, ai]:
                        best_iou[ix, iz, ai] = iou
                        assigned[ix, iz, ai] = gi
                    if iou > gt_best:
                        gt_best, gt_best_idx = iou, (ix, iz, ai)
        if gt_best_idx is None:
            # ground truth outside the window sweep: force the nearest cell
            ix = int(np.clip((gt.x - grid.x_range[0]) / grid.cell_size_x, 0, grid.grid_x - 1))
            iz = int(np.clip((gt.z - grid.z_range[0]) / grid.cell_size_z, 0, grid.grid_z - 1))
            gt_best_idx = (ix, iz, 0)
            if assigned[gt_best_idx] < 0:
                assigned[gt_best_idx] = gi
        # force-match: the best anchor for this box is positive regardless
        labels[gt_best_idx] = 1
        assigned[gt_best_idx] = gi
        best_iou[gt_best_idx] = max(gt_best, POSITIVE_IOU)

    labels[best_iou >= POSITIVE_IOU] = 1
    ignore = (best_iou >= NEGATIVE_IOU) & (best_iou < POSITIVE_IOU) & (labels != 1)
    labels[ignore] = -1

    pos = np.argwhere(labels == 1)
    diag = anchors.diag
    for ix, iz, ai in pos:
        gt = gts[assigned[ix, iz, ai]]
        arow = anchor_arr[ix, iz, ai]
        # wrap the heading difference into [-pi/2, pi/2): rectangles are
        # symmetric under 180-degree flips, so this loses nothing and keeps
        # sin() invertible at decode time
        delta = (gt.yaw - arow[6] + math.pi / 2) % math.pi - math.pi / 2
        gt_row = np.array([gt.x, gt.y, gt.z, gt.length, gt.width, gt.height,
                           arow[6] + delta])
        residuals[ix, iz, ai] = encode_residuals(gt_row, arow, diag)[0]
    return AnchorTargets(labels, residuals)


# ---------------------------------------------------------------------------
# loss


def detection_loss(tape: Tape | None, logits: Tensor, residuals: Tensor,
                   targets: AnchorTargets, regression_weight: float = REGRESSION_WEIGHT):
    """Mean BCE over positive+negative anchors plus weighted mean squared
    residual error over positives; ignore anchors contribute nothing.
    Returns (total, cls_value, reg_value)."""
    cls_targets = (targets.labels == 1).astype(float)
    cls = ops.binary_cross_entropy_logits(
        tape, logits, cls_targets, targets.classified_mask
    )
    reg = ops.squared_error_mean(
        tape, residuals, targets.residuals, targets.positive_mask
    )
    total = ops.add(tape, cls, ops.scale(tape, reg, regression_weight))
    return total, float(cls.value), float(reg.value)


# ---------------------------------------------------------------------------
# augmentation


def apply_augmentation(cloud: TimedPointCloud, boxes: list[DetectionBox],
                       rig: list[CameraModel], flip: bool, angle: float):
    """Deterministic core: mirror across x (optional), then rotate about +y
    by `angle`. Camera extrinsics absorb the inverse so projections of
    transformed geometry match the original pixels."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    mirror = np.diag([-1.0, 1.0, 1.0]) if flip else np.eye(3)
    m = rot @ mirror  # mirror across x first, then rotate about +y
    pts = cloud.points @ m.T
    new_cloud = TimedPointCloud(pts, cloud.features.copy())

    new_boxes = []
    for b in boxes:
        center = m @ np.array([b.x, b.y, b.z])
        yaw = -b.yaw if flip else b.yaw
        yaw = yaw + angle
        yaw = (yaw + math.pi) % (2.0 * math.pi) - math.pi
        new_boxes.append(
            DetectionBox(center[0], center[1], center[2], b.length, b.width,
                         b.height, yaw, b.score, b.class_id)
        )

    a4 = np.eye(4)
    a4[:3, :3] = m
    a4_inv = np.linalg.inv(a4)
    new_rig = [
        CameraModel(cam.K, cam.E @ a4_inv, cam.image_width, cam.image_height)
        for cam in rig
    ]
    return new_cloud, new_boxes, new_rig


def augment_sample(cloud: TimedPointCloud, boxes: list[DetectionBox],
                   rig: list[CameraModel], seed: int):
    """Random wrapper: mirror with probability 1/2, heading rotation drawn
    uniformly from [-45, 45] degrees."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-math.pi / 4, math.pi / 4))
    return apply_augmentation(cloud, boxes, rig, flip, angle)


# ---------------------------------------------------------------------------
# schedule


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the last step."""
    if step > config.steps:
        raise ValueError(f"step {step} beyond configured steps {config.steps}")
    if step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    span = config.steps - config.warmup_steps
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - config.warmup_steps) / span))


# ---------------------------------------------------------------------------
# data pipeline


@dataclass
class SceneSample:
    """Per-scene cache: accumulated cloud in the last frame's ego frame,
    rendered camera stacks, ground truth, and the ego-frame rig."""

    cloud: TimedPointCloud
    images: list[np.ndarray]  # per camera: (H, W, T, 3) for the last T frames
    rig: list[CameraModel]
    gt_boxes: list[DetectionBox]


def build_scene_sample(scene: Scene, frames: int, image_frames: int,
                       dtype=np.float64) -> SceneSample:
    last = scene.frame_count - 1
    first = max(0, scene.frame_count - frames)
    sweeps = [simulate_lidar_frame(scene, f) for f in range(first, scene.frame_count)]
    cloud = accumulate(sweeps, sweeps[-1].ego_pose, scene.params.frame_dt)
    cloud = TimedPointCloud(cloud.points.astype(dtype), cloud.features.astype(dtype))
    img_first = max(0, scene.frame_count - max(image_frames, 1))
    frame_ids = list(range(img_first, scene.frame_count))
    images = [
        build_image_tensor(scene, ci, frame_ids).astype(dtype)
        for ci in range(len(scene.rig))
    ]
    return SceneSample(cloud, images, scene.rig, ground_truth_boxes(scene, last))


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[:2]
    rest = img.shape[2:]
    return img.reshape(h // factor, factor, w // factor, factor, *rest).mean(axis=(1, 3))


def stream_inputs_for(model_config: ModelConfig, images: list[np.ndarray]):
    """Tower inputs per stream per camera from the cached (H, W, T, 3) stacks."""
    native = model_config.camera_native_resolution
    out = []
    for stream in model_config.streams:
        factor = native // stream.resolution
        per_cam = []
        for img in images:
            if stream.kind == "still":
                frame = img[:, :, -1, :]
                per_cam.append(_downsample(frame, factor))
            else:
                tail = img[:, :, -stream.frames:, :]
                clip = np.moveaxis(tail, 2, 0)  # (T, H, W, 3)
                per_cam.append(
                    np.stack([_downsample(fr, factor) for fr in clip], axis=0)
                )
        out.append(per_cam)
    return out


def prepare_frame_sample(scene_sample: SceneSample, model: Model,
                         augment_seed: int | None, pillar_seed: int):
    """Augment (optional), pillarize, and assemble one model input plus its
    anchor targets."""
    cloud, boxes, rig = scene_sample.cloud, scene_sample.gt_boxes, scene_sample.rig
    if augment_seed is not None:
        cloud, boxes, rig = augment_sample(cloud, boxes, rig, augment_seed)
    pillars = pillarize(cloud, model.config.grid, pillar_seed)
    sample = FrameSample(
        pillars=pillars,
        stream_inputs=stream_inputs_for(model.config, scene_sample.images),
        rig=rig,
        gt_boxes=boxes,
    )
    targets = match_anchors(model.anchor_grid, boxes)
    return sample, targets


def load_split_scenes(dataset_dir: str | Path, split: str) -> list[Scene]:
    manifest = read_manifest(dataset_dir)
    names = manifest["splits"].get(split)
    if names is None:
        raise KeyError(f"split {split!r} not in manifest ({list(manifest['splits'])})")
    return [load_scene(Path(dataset_dir) / n) for n in names]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    trace: list[dict]
    train_seconds: float
    model: Model

    def final_loss(self) -> float:
        return self.trace[-1]["total"]


def _image_frames_needed(config: ModelConfig) -> int:
    frames = [s.frames for s in config.streams] or [0]
    return max(frames)


def train_loop(model: Model, config: TrainConfig, scenes: list[Scene],
               out_dir: str | Path | None = None,
               checkpoint_name: str = "model.ckpt") -> TrainResult:
    """Seed-deterministic optimization; emits a per-step loss CSV and a
    checkpoint when out_dir is given. Raises on non-finite loss."""
    if not scenes:
        raise ValueError("training needs at least one scene")
    dtype = np.float64 if config.dtype == "float64" else np.float32
    model.astype(dtype)
    image_frames = _image_frames_needed(model.config)
    cache: dict[int, SceneSample] = {}

    def scene_sample(idx: int) -> SceneSample:
        if idx not in cache:
            cache[idx] = build_scene_sample(
                scenes[idx], config.frames, image_frames, dtype
            )
        return cache[idx]

    optimizer = (
        Adam(model.params) if config.optimizer == "adam" else SgdMomentum(model.params, 0.9)
    )
    pick = rng_for(config.seed, 3)
    trace: list[dict] = []
    t_start = time.perf_counter()
    for step in range(config.steps):
        lr = lr_schedule(step, config)
        model.params.zero_grad()
        cls_sum = reg_sum = total_sum = 0.0
        for slot in range(config.batch_size):
            idx = int(pick.integers(0, len(scenes)))
            draw = int(rng_for(config.seed, 4, step, slot).integers(0, 2**62))
            sample, targets = prepare_frame_sample(
                scene_sample(idx), model,
                augment_seed=draw if config.augment else None,
                pillar_seed=draw + 1,
            )
            tape = Tape()
            logits, residuals, _ = model.forward(sample, tape)
            total, cls_v, reg_v = detection_loss(tape, logits, residuals, targets)
            tape.backward(total)
            cls_sum += cls_v
            reg_sum += reg_v
            total_sum += float(total.value)
        if not math.isfinite(total_sum):
            raise RuntimeError(
                f"loss became non-finite at step {step} "
                f"(cls={cls_sum}, reg={reg_sum})"
            )
        inv = 1.0 / config.batch_size
        for t in model.params.tensors():
            if t.grad is None:  # a branch unused this step (e.g. empty scan)
                t.grad = np.zeros_like(t.value)
            t.grad *= inv
        optimizer.step(lr)
        trace.append({
            "step": step,
            "lr": lr,
            "cls_loss": cls_sum * inv,
            "reg_loss": reg_sum * inv,
            "total": total_sum * inv,
        })
    train_seconds = time.perf_counter() - t_start

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_csv(out_dir / "loss.csv", trace)
        save_checkpoint(out_dir / checkpoint_name, model.params.to_arrays())
    return TrainResult(trace, train_seconds, model)


def write_loss_csv(path: str | Path, trace: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "cls_loss", "reg_loss", "total"])
        for row in trace:
            writer.writerow([
                row["step"], repr(row["lr"]), repr(row["cls_loss"]),
                repr(row["reg_loss"]), repr(row["total"]),
            ])
