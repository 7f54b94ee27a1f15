"""Comparative study harness: trains named model variants on a shared
synthetic dataset, evaluates range-bucketed AP on a held-out split, and
writes one CSV row per (variant, seed).

Variants mirror the fusion design space: point-cloud-only with one or many
accumulated sweeps, camera projection fusion with fixed / learned-static /
per-pillar-dynamic connections, the geometry-free flatten and spatial-average
baselines, and a two-stream (video + still) configuration.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .evaluation import EvalReport, evaluate_detections, write_report_csv
from .fusion import Model, ModelConfig, TowerConfig, decode_and_nms
from .pillars import GridConfig
from .simworld import Scene, SceneParameters
from .training import (
    TrainConfig,
    build_scene_sample,
    load_split_scenes,
    prepare_frame_sample,
    train_loop,
)

STUDY_GRID = GridConfig(
    x_range=(-76.8, 76.8), z_range=(-76.8, 76.8), y_range=(-2.0, 4.0),
    grid_x=64, grid_z=64, max_points_per_pillar=128, max_pillars=2000,
)

STUDY_SCENE_PARAMS = SceneParameters(actor_count=(4, 12), ground_points_per_frame=3000)

STUDY_STEPS = 1400  # cosine schedule; the class head separates by mid-run

STILL_STREAM = TowerConfig("still", 96, channels=(8, 16, 32, 64))
VIDEO_STREAM = TowerConfig("video", 48, frames=8, channels=(8, 16, 32, 64))


def _base_model_kwargs() -> dict:
    return dict(
        grid=STUDY_GRID,
        pseudo_channels=16,
        backbone_channels=(16, 32, 64),
        backbone_repeats=(2, 2, 2),
        upsample_channels=16,
        fusion_width=8,
        camera_native_resolution=96,
    )


@dataclass
class StudyVariant:
    name: str
    frames: int
    model_config: ModelConfig


def build_variant(name: str) -> StudyVariant:
    kw = _base_model_kwargs()
    if name == "pc1":
        return StudyVariant(name, 1, ModelConfig(**kw))
    if name == "pc16":
        return StudyVariant(name, 16, ModelConfig(**kw))
    if name == "projection":
        cfg = ModelConfig(streams=[STILL_STREAM], fusion_mode="projection",
                          connection_mode=None, **kw)
        return StudyVariant(name, 16, cfg)
    if name == "static":
        cfg = ModelConfig(streams=[STILL_STREAM], fusion_mode="projection",
                          connection_mode="static", **kw)
        return StudyVariant(name, 16, cfg)
    if name == "dynamic":
        cfg = ModelConfig(streams=[STILL_STREAM], fusion_mode="projection",
                          connection_mode="dynamic", **kw)
        return StudyVariant(name, 16, cfg)
    if name == "spatial_avg":
        cfg = ModelConfig(streams=[STILL_STREAM], fusion_mode="spatial_avg", **kw)
        return StudyVariant(name, 16, cfg)
    if name == "flatten":
        cfg = ModelConfig(streams=[STILL_STREAM], fusion_mode="flatten", **kw)
        return StudyVariant(name, 16, cfg)
    if name == "multistream":
        cfg = ModelConfig(streams=[VIDEO_STREAM, STILL_STREAM],
                          fusion_mode="projection", connection_mode="dynamic", **kw)
        return StudyVariant(name, 16, cfg)
    raise KeyError(f"unknown study variant {name!r}")


STUDY_VARIANTS = [
    "pc1", "pc16", "projection", "static", "dynamic",
    "spatial_avg", "flatten", "multistream",
]

# variants whose orderings the comparative study asserts
CORE_VARIANTS = ["pc1", "pc16", "projection", "static", "dynamic", "spatial_avg"]


def study_train_config(steps: int, seed: int, frames: int) -> TrainConfig:
    # study runs use a higher rate than the 0.0015 default: the tiny desk
    # model tolerates it and the class head separates much sooner
    return TrainConfig(
        steps=steps,
        warmup_steps=max(steps // 20, 1),
        batch_size=4,
        base_lr=0.008,
        seed=seed,
        frames=frames,
        augment=True,
        optimizer="adam",
        dtype="float32",
    )


def evaluate_model(model: Model, scenes: list[Scene], frames: int,
                   nms_iou: float = 0.5, ap_iou: float = 0.7):
    """Inference over scenes; returns (EvalReport, infer_ms_per_frame)."""
    image_frames = max([s.frames for s in model.config.streams] or [0])
    preds, gts = [], []
    infer_s = 0.0
    for idx, scene in enumerate(scenes):
        src = build_scene_sample(scene, frames, image_frames, np.dtype(model.dtype))
        sample, _ = prepare_frame_sample(src, model, None, pillar_seed=idx)
        t0 = time.perf_counter()
        logits, residuals, _ = model.forward(sample, None)
        boxes = decode_and_nms(
            logits.value, residuals.value, model.anchor_grid, iou_threshold=nms_iou
        )
        infer_s += time.perf_counter() - t0
        preds.append(boxes)
        gts.append(sample.gt_boxes)
    report = evaluate_detections(preds, gts, iou_threshold=ap_iou)
    return report, 1000.0 * infer_s / max(len(scenes), 1)


def run_study_task(args) -> dict:
    """One (variant, seed) training + evaluation; a top-level function so it
    can cross process boundaries."""
    name, seed, dataset_dir, steps, test_limit = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    variant = build_variant(name)
    train_scenes = load_split_scenes(dataset_dir, "train")
    test_scenes = load_split_scenes(dataset_dir, "test")
    if test_limit:
        test_scenes = test_scenes[:test_limit]
    model = Model(variant.model_config, seed=seed)
    config = study_train_config(steps, seed, variant.frames)
    result = train_loop(model, config, train_scenes)
    report, infer_ms = evaluate_model(model, test_scenes, variant.frames)
    return {
        "config_name": name,
        "seed": seed,
        "ap_all": round(report.ap_overall, 4),
        "ap_lt30": round(report.ap_under_30m, 4),
        "ap_30_50": round(report.ap_30_to_50m, 4),
        "ap_gt50": round(report.ap_over_50m, 4),
        "train_seconds": round(result.train_seconds, 1),
        "infer_ms_per_frame": round(infer_ms, 1),
    }


def ablation_report(variant_names: list[str], dataset_dir: str | Path,
                    seeds: list[int], steps: int = 400, jobs: int = 1,
                    test_limit: int | None = None,
                    out_csv: str | Path | None = None) -> list[dict]:
    """Train and evaluate every (variant, seed) pair; rows come back in a
    deterministic order regardless of scheduling."""
    tasks = [
        (name, seed, str(dataset_dir), steps, test_limit)
        for name in variant_names
        for seed in seeds
    ]
    if jobs <= 1:
        rows = [run_study_task(t) for t in tasks]
    else:
        ctx = get_context("fork")
        with ctx.Pool(processes=jobs, maxtasksperchild=1) as pool:
            rows = pool.map(run_study_task, tasks)
    rows.sort(key=lambda r: (variant_names.index(r["config_name"]), r["seed"]))
    if out_csv is not None:
        write_report_csv(out_csv, rows)
    return rows


def mean_by_variant(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Mean AP metrics per variant plus the seed spread (max - min of ap_all)."""
    out: dict[str, dict[str, float]] = {}
    names = {r["config_name"] for r in rows}
    for name in names:
        sel = [r for r in rows if r["config_name"] == name]
        out[name] = {
            key: float(np.mean([r[key] for r in sel]))
            for key in ("ap_all", "ap_lt30", "ap_30_50", "ap_gt50")
        }
        vals = [r["ap_all"] for r in sel]
        out[name]["spread"] = float(max(vals) - min(vals))
    return out
