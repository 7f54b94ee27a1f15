"""Rotated-box IoU and range-bucketed average precision.

IoU between oriented boxes is computed exactly: convex polygon clipping in
the top-down plane times the vertical interval overlap. A Monte-Carlo
volume estimator ships alongside as an independent oracle. Average
precision uses greedy score-descending matching (one ground-truth box per
prediction) and all-points precision-recall integration, with results
bucketed by object range in the x-z plane.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import DetectionBox

BUCKETS: dict[str, tuple[float, float]] = {
    "all": (0.0, math.inf),
    "lt30": (0.0, 30.0),
    "30to50": (30.0, 50.0),
    "gt50": (50.0, math.inf),
}


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex counter-clockwise
    `clip`; both are (N, 2) vertex arrays."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        points = output
        output = []
        prev = points[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in points:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if abs(denom) > 1e-15:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(output) if output else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def bev_intersection_area(a: DetectionBox, b: DetectionBox) -> float:
    return _polygon_area(_clip_polygon(a.bev_corners(), b.bev_corners()))


def bev_iou(a: DetectionBox, b: DetectionBox) -> float:
    """Rotated-rectangle IoU in the top-down plane."""
    inter = bev_intersection_area(a, b)
    union = a.length * a.width + b.length * b.width - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: DetectionBox, b: DetectionBox) -> float:
    """Volume IoU: clipped top-down polygon times vertical overlap."""
    inter_area = bev_intersection_area(a, b)
    if inter_area <= 0:
        return 0.0
    y_lo = max(a.y - a.height / 2, b.y - b.height / 2)
    y_hi = min(a.y + a.height / 2, b.y + b.height / 2)
    inter = inter_area * max(0.0, y_hi - y_lo)
    vol_a = a.length * a.width * a.height
    vol_b = b.length * b.width * b.height
    union = vol_a + vol_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def monte_carlo_iou_3d(a: DetectionBox, b: DetectionBox, samples: int = 1_000_000,
                       seed: int = 0) -> float:
    """Independent volume-sampling estimate of iou_3d."""
    from .boxes import points_in_box

    corners = np.vstack([a.corners_3d(), b.corners_3d()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(samples, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    either = int((in_a | in_b).sum())
    both = int((in_a & in_b).sum())
    if either == 0:
        return 0.0
    return both / either


def _bucket_of(r: float) -> dict[str, bool]:
    return {name: lo <= r < hi for name, (lo, hi) in BUCKETS.items()}


def average_precision(preds_by_scene: list[list[DetectionBox]],
                      gts_by_scene: list[list[DetectionBox]],
                      iou_threshold: float = 0.7,
                      bucket: str = "all") -> float:
    """All-points-interpolated AP at one 3D-IoU threshold for one range bucket.

    Matching is global and greedy in descending score (ties broken by lower
    center x); each ground-truth box matches at most one prediction. The
    bucket of a true positive is its ground-truth box's range; the bucket
    of an unmatched prediction is its own range.
    """
    if bucket not in BUCKETS:
        raise KeyError(f"unknown bucket {bucket!r}; options: {sorted(BUCKETS)}")
    lo, hi = BUCKETS[bucket]
    if len(preds_by_scene) != len(gts_by_scene):
        raise ValueError("per-scene prediction and ground-truth lists must align")

    flat = [
        (scene_idx, box)
        for scene_idx, boxes in enumerate(preds_by_scene)
        for box in boxes
    ]
    if flat:
        scores = np.array([b.score for _, b in flat])
        xs = np.array([b.x for _, b in flat])
        order = np.lexsort((xs, -scores))
    else:
        order = []

    npos = sum(1 for gts in gts_by_scene for g in gts if lo <= g.range_xz < hi)
    matched = [np.zeros(len(g), dtype=bool) for g in gts_by_scene]
    events = []  # (is_tp,) in score order, bucket-filtered
    for k in order:
        scene_idx, pred = flat[k]
        gts = gts_by_scene[scene_idx]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[scene_idx][j]:
                continue
            v = iou_3d(pred, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[scene_idx][best_j] = True
            if lo <= gts[best_j].range_xz < hi:
                events.append(True)
        else:
            if lo <= pred.range_xz < hi:
                events.append(False)

    if npos == 0:
        return 0.0
    tp = np.cumsum([e for e in events]) if events else np.zeros(0)
    fp = np.cumsum([not e for e in events]) if events else np.zeros(0)
    if len(tp) == 0:
        return 0.0
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope then exact area under the recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


@dataclass
class EvalReport:
    ap_overall: float
    ap_under_30m: float
    ap_30_to_50m: float
    ap_over_50m: float

    def __post_init__(self):
        for v in (self.ap_overall, self.ap_under_30m, self.ap_30_to_50m, self.ap_over_50m):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"AP values must lie in [0, 1], got {v}")

    def as_row(self) -> list[float]:
        return [self.ap_overall, self.ap_under_30m, self.ap_30_to_50m, self.ap_over_50m]


def evaluate_detections(preds_by_scene, gts_by_scene, iou_threshold: float = 0.7) -> EvalReport:
    return EvalReport(
        ap_overall=average_precision(preds_by_scene, gts_by_scene, iou_threshold, "all"),
        ap_under_30m=average_precision(preds_by_scene, gts_by_scene, iou_threshold, "lt30"),
        ap_30_to_50m=average_precision(preds_by_scene, gts_by_scene, iou_threshold, "30to50"),
        ap_over_50m=average_precision(preds_by_scene, gts_by_scene, iou_threshold, "gt50"),
    )


REPORT_COLUMNS = [
    "config_name", "seed", "ap_all", "ap_lt30", "ap_30_50", "ap_gt50",
    "train_seconds", "infer_ms_per_frame",
]


def write_report_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})
