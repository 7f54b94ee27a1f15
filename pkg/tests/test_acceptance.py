"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured values (run with -s to stream them).

The comparative-study criterion trains the full variant grid and is marked
`slow`; it budgets CPU time rather than wall time so the same check is
meaningful on boxes with fewer cores than the nominal eight.
"""

import math
import os
import time

import numpy as np
import pytest

from p4d.ablation import (
    CORE_VARIANTS,
    STUDY_SCENE_PARAMS,
    STUDY_STEPS,
    ablation_report,
    build_variant,
    mean_by_variant,
)
from p4d.anchors import AnchorGrid
from p4d.autodiff import load_checkpoint
from p4d.boxes import DetectionBox
from p4d.cli import run as cli_run
from p4d.evaluation import iou_3d, monte_carlo_iou_3d
from p4d.fusion import (
    Model,
    decode_and_nms,
    multi_camera_feature,
    sample_projected_feature,
)
from p4d.geometry import CameraModel, RigidTransform
from p4d.pillars import GridConfig, accumulate, density_profile, pillarize
from p4d.simworld import (
    SceneParameters,
    build_rig,
    generate_scene,
    rng_for,
    simulate_lidar_frame,
    write_dataset,
)
from p4d.training import (
    TrainConfig,
    augment_sample,
    build_scene_sample,
    prepare_frame_sample,
    train_loop,
)


def report(criterion: str, detail: str) -> None:
    print(f"\n[{criterion}] PASS - {detail}")


class TestCriterion1GradientGate:
    def test_grad_check_under_budget(self, capsys):
        t0 = time.perf_counter()
        code = cli_run(["grad-check", "--trials", "20", "--seed", "1"])
        elapsed = time.perf_counter() - t0
        out = capsys.readouterr().out
        assert code == 0, f"grad-check failed:\n{out}"
        assert "FAIL" not in out
        assert "fusion_layer (composed)" in out
        assert elapsed < 60.0, f"grad-check took {elapsed:.1f}s"
        with capsys.disabled():
            report("criterion 1", f"all op kinds + composed fusion layer "
                                  f"< 1e-4 in {elapsed:.1f}s")


class TestCriterion2ProjectionFusionProperties:
    CASES = 1000

    def test_out_of_view_zero_vectors(self):
        rng = np.random.default_rng(0)
        rig = build_rig(SceneParameters())
        fmap = rng.normal(size=(24, 24, 6))
        checked = 0
        while checked < self.CASES:
            p = rng.uniform([-80, -2, -80], [80, 4, 80])
            cam = rig[rng.integers(0, len(rig))]
            uv, vis = cam.project(p[None])
            if vis[0]:
                continue
            out = sample_projected_feature(fmap, cam, p, downscale=4)
            assert np.array_equal(out, np.zeros(6))
            checked += 1
        report("criterion 2a", f"{checked} out-of-view points returned exact zeros")

    def test_connection_weights_normalize(self):
        variant = build_variant("dynamic")
        model = Model(variant.model_config, seed=1).astype(np.float32)
        rows = 0
        scene_idx = 0
        while rows < self.CASES:
            scene = generate_scene(STUDY_SCENE_PARAMS, 900 + scene_idx)
            scene_idx += 1
            src = build_scene_sample(scene, 4, 1, np.float32)
            sample, _ = prepare_frame_sample(src, model, None, pillar_seed=scene_idx)
            _, _, aux = model.forward(sample)
            for _, w in aux["connection_weights"].items():
                dev = np.abs(w.sum(axis=-1) - 1.0)
                assert dev.max() < 1e-6, f"weight normalization off by {dev.max()}"
                rows += w.shape[0] if w.ndim > 1 else 1
        report("criterion 2b", f"softmax weights summed to 1 within 1e-6 over "
                               f"{rows} pillar rows")

    def test_multi_camera_summation(self):
        rng = np.random.default_rng(2)
        rig = build_rig(SceneParameters())
        fmaps = [rng.normal(size=(24, 24, 5)) for _ in rig]
        for _ in range(self.CASES):
            p = rng.uniform([-40, 0, -40], [40, 2.5, 40])
            singles = [
                sample_projected_feature(fm, cam, p, downscale=4)
                for fm, cam in zip(fmaps, rig)
            ]
            total = multi_camera_feature(fmaps, rig, p, downscale=4)
            np.testing.assert_allclose(total, np.sum(singles, axis=0), atol=1e-12)
        report("criterion 2c", f"{self.CASES} multi-camera samples summed exactly")

    def test_augmentation_projection_consistency(self):
        rng = np.random.default_rng(3)
        scene = generate_scene(STUDY_SCENE_PARAMS, 17)
        src = build_scene_sample(scene, 4, 1)
        pts = src.cloud.points[
            rng.choice(len(src.cloud.points), 40, replace=False)
        ]
        from p4d.pillars import TimedPointCloud

        cloud = TimedPointCloud(pts, np.zeros((len(pts), 2)))
        for case in range(self.CASES):
            cloud2, _, rig2 = augment_sample(cloud, [], src.rig, seed=case)
            for cam, cam2 in zip(src.rig, rig2):
                uv0, vis0 = cam.project(cloud.points)
                uv1, vis1 = cam2.project(cloud2.points)
                np.testing.assert_array_equal(vis0, vis1)
                np.testing.assert_allclose(uv1[vis0], uv0[vis0], atol=1e-6)
        report("criterion 2d", f"{self.CASES} random augmentations left "
                               f"projections unchanged within 1e-6 px")


class TestCriterion3FixedCompute:
    def test_pillar_tensor_bytes_constant(self):
        scene = generate_scene(SceneParameters(frame_count=32), 5)
        sweeps = [simulate_lidar_frame(scene, f) for f in range(32)]
        grid = GridConfig()
        sizes = {}
        for t in (1, 4, 16, 32):
            cloud = accumulate(sweeps[-t:], sweeps[-1].ego_pose)
            pillars = pillarize(cloud, grid, seed=2)
            sizes[t] = pillars.nbytes
        assert len(set(sizes.values())) == 1, sizes
        report("criterion 3", f"pillar tensor bytes identical for T=1,4,16,32 "
                              f"({sizes[1]} bytes)")


class TestCriterion4DensityReproduction:
    def test_far_bin_grows_3x_over_50_scenes(self):
        t0 = time.perf_counter()
        edges = [20.0, 32.0]
        singles, manys = [], []
        for i in range(50):
            seed = int(rng_for(7, 5, i).integers(0, 2**63 - 1))
            scene = generate_scene(SceneParameters(), seed)
            sweeps = [simulate_lidar_frame(scene, f) for f in range(16)]
            pose = sweeps[-1].ego_pose
            singles.append(density_profile(accumulate(sweeps[-1:], pose), edges)[0])
            manys.append(density_profile(accumulate(sweeps, pose), edges)[0])
        ratio = np.mean(manys) / np.mean(singles)
        elapsed = time.perf_counter() - t0
        assert ratio >= 3.0, f"far-bin density gain {ratio:.2f}x < 3x"
        assert elapsed < 120.0, f"density check took {elapsed:.1f}s"

        # determinism: same seed reproduces the same profile exactly
        scene = generate_scene(SceneParameters(), 123)
        a = density_profile(
            accumulate([simulate_lidar_frame(scene, 0)], scene.ego_trajectory[0]), edges
        )
        b = density_profile(
            accumulate([simulate_lidar_frame(scene, 0)], scene.ego_trajectory[0]), edges
        )
        assert np.array_equal(a, b)
        report("criterion 4", f"20-32m density gain {ratio:.2f}x (>= 3x) over 50 "
                              f"scenes in {elapsed:.0f}s, deterministic per seed")


class TestCriterion5IouOracle:
    def test_polygon_clipping_matches_monte_carlo(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for k in range(100):
            a = DetectionBox(
                rng.uniform(-2, 2), rng.uniform(-0.3, 0.3), rng.uniform(-2, 2),
                rng.uniform(3.5, 5.5), rng.uniform(1.6, 2.4), rng.uniform(1.3, 2.0),
                rng.uniform(-math.pi, math.pi),
            )
            b = DetectionBox(
                a.x + rng.uniform(-3, 3), a.y + rng.uniform(-0.4, 0.4),
                a.z + rng.uniform(-3, 3),
                rng.uniform(3.5, 5.5), rng.uniform(1.6, 2.4), rng.uniform(1.3, 2.0),
                rng.uniform(-math.pi, math.pi),
            )
            exact = iou_3d(a, b)
            estimate = monte_carlo_iou_3d(a, b, samples=1_000_000, seed=k)
            worst = max(worst, abs(exact - estimate))
        assert worst < 0.01, f"worst clip-vs-MC deviation {worst:.4f}"
        report("criterion 5", f"100 rotated pairs, worst |clip - MC(1e6)| = {worst:.4f}")


@pytest.mark.slow
class TestCriterion6AblationOrdering:
    BUDGET_CORE_SECONDS = 8 * 60 * 60.0  # stated as < 60 min on 8 CPU cores

    @pytest.fixture(scope="class")
    def dataset(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("study_data")
        write_dataset(out, STUDY_SCENE_PARAMS, seed=11,
                      splits={"train": 128, "test": 200})
        return out

    def test_orderings_hold(self, dataset, capsys):
        jobs = max(1, min(8, os.cpu_count() or 1))
        t_cpu0 = os.times()
        t0 = time.perf_counter()
        rows = ablation_report(
            CORE_VARIANTS, dataset, seeds=[0, 1, 2], steps=STUDY_STEPS, jobs=jobs,
        )
        t_cpu1 = os.times()
        wall = time.perf_counter() - t0
        core_seconds = (
            (t_cpu1.user - t_cpu0.user) + (t_cpu1.system - t_cpu0.system)
            + (t_cpu1.children_user - t_cpu0.children_user)
            + (t_cpu1.children_system - t_cpu0.children_system)
        )
        m = mean_by_variant(rows)
        with capsys.disabled():
            print(f"\n{'variant':12s} {'ap_all':>7s} {'<30m':>7s} {'30-50m':>7s} {'>50m':>7s}")
            for name in CORE_VARIANTS:
                print(f"{name:12s} {m[name]['ap_all']:7.3f} {m[name]['ap_lt30']:7.3f} "
                      f"{m[name]['ap_30_50']:7.3f} {m[name]['ap_gt50']:7.3f}")
            print(f"study wall {wall/60:.1f} min on {jobs} workers; "
                  f"{core_seconds/60:.0f} core-min "
                  f"({core_seconds/8/60:.1f} min at 8 cores)")

        assert m["pc16"]["ap_all"] >= m["pc1"]["ap_all"] + 0.02, \
            f"16-sweep gain over 1-sweep below 2 points: {m['pc16']['ap_all']:.3f} vs {m['pc1']['ap_all']:.3f}"
        assert m["projection"]["ap_all"] >= m["spatial_avg"]["ap_all"] + 0.01, \
            f"projection not >= spatial_avg + 1pt: {m['projection']['ap_all']:.3f} vs {m['spatial_avg']['ap_all']:.3f}"
        assert m["spatial_avg"]["ap_all"] >= m["pc16"]["ap_all"] + 0.01, \
            f"spatial_avg not >= no-camera + 1pt: {m['spatial_avg']['ap_all']:.3f} vs {m['pc16']['ap_all']:.3f}"
        assert m["dynamic"]["ap_all"] >= m["static"]["ap_all"], \
            f"dynamic < static: {m['dynamic']['ap_all']:.3f} vs {m['static']['ap_all']:.3f}"
        assert m["static"]["ap_all"] >= m["projection"]["ap_all"], \
            f"static < fixed projection: {m['static']['ap_all']:.3f} vs {m['projection']['ap_all']:.3f}"
        assert m["dynamic"]["ap_gt50"] >= m["pc16"]["ap_gt50"] + 0.03, \
            f"far-range fusion gain below 3 points: {m['dynamic']['ap_gt50']:.3f} vs {m['pc16']['ap_gt50']:.3f}"
        assert core_seconds < self.BUDGET_CORE_SECONDS, \
            f"study used {core_seconds:.0f} core-seconds (> 8 cores x 60 min)"
        report("criterion 6",
               f"orderings hold: pc16 {m['pc16']['ap_all']:.3f} > pc1 {m['pc1']['ap_all']:.3f} (+2pt), "
               f"proj {m['projection']['ap_all']:.3f} > avg {m['spatial_avg']['ap_all']:.3f} > "
               f"no-cam (+1pt each), dyn {m['dynamic']['ap_all']:.3f} >= static {m['static']['ap_all']:.3f} "
               f">= proj, far gain {m['dynamic']['ap_gt50']-m['pc16']['ap_gt50']:+.3f} (>= +3pt); "
               f"{core_seconds/60:.0f} core-min")


class TestCriterion7TrainingSanity:
    def overfit_config(self, seed):
        return TrainConfig(steps=200, warmup_steps=10, batch_size=2, base_lr=0.003,
                           seed=seed, frames=16, augment=False, dtype="float64")

    def test_overfit_halves_loss_three_seeds(self):
        scene = generate_scene(
            SceneParameters(actor_count=(3, 5), spawn_range=(8.0, 45.0),
                            ground_points_per_frame=2000),
            seed=12,
        )
        ratios = []
        for seed in (0, 1, 2):
            model = Model(build_variant("pc16").model_config, seed=seed)
            result = train_loop(model, self.overfit_config(seed), [scene])
            first = result.trace[0]["total"]
            last = result.trace[-1]["total"]
            ratios.append(last / first)
            assert last < 0.5 * first, \
                f"seed {seed}: loss {first:.3f} -> {last:.3f} not halved"
        report("criterion 7a", "200-step overfit halved the loss on 3/3 seeds "
                               f"(ratios {[round(r, 3) for r in ratios]})")

    def test_bit_identical_traces(self, tmp_path):
        scene = generate_scene(
            SceneParameters(actor_count=(2, 3), spawn_range=(8.0, 30.0),
                            ground_points_per_frame=1200, frame_count=8),
            seed=4,
        )
        blobs = []
        for run in range(2):
            model = Model(build_variant("pc16").model_config, seed=3)
            cfg = TrainConfig(steps=30, warmup_steps=3, batch_size=2, base_lr=0.003,
                              seed=9, frames=8, augment=True, dtype="float64")
            out = tmp_path / f"run{run}"
            train_loop(model, cfg, [scene], out)
            blobs.append((out / "loss.csv").read_bytes())
            # checkpoints match too
            blobs.append((out / "model.ckpt").read_bytes())
        assert blobs[0] == blobs[2] and blobs[1] == blobs[3]
        report("criterion 7b", "identical-seed double-precision runs produced "
                               "byte-identical loss traces and checkpoints")


class TestCriterion8DecodeFilters:
    def anchors(self):
        return AnchorGrid(GridConfig())

    def test_boundary_cases(self):
        anchors = self.anchors()
        shape = (anchors.grid.grid_x, anchors.grid.grid_z, 2)
        cases = [
            ("score 0.39", math.log(0.39 / 0.61), {}, 0),
            ("score 0.41", math.log(0.41 / 0.59), {}, 1),
            ("length 30.5", 4.0, {3: math.log(30.5 / 4.7)}, 0),
            ("length 29.5", 4.0, {3: math.log(29.5 / 4.7)}, 1),
            ("width 5.2", 4.0, {4: math.log(5.2 / 2.1)}, 0),
            ("width 4.8", 4.0, {4: math.log(4.8 / 2.1)}, 1),
            ("length 0.45", 4.0, {3: math.log(0.45 / 4.7)}, 0),
            ("width 0.45", 4.0, {4: math.log(0.45 / 2.1)}, 0),
            ("height 0.45", 4.0, {5: math.log(0.45 / 1.7)}, 0),
        ]
        for name, logit, res_map, expect in cases:
            logits = np.full(shape, -30.0)
            residuals = np.zeros(shape + (7,))
            logits[10, 10, 0] = logit
            for k, v in res_map.items():
                residuals[10, 10, 0, k] = v
            out = decode_and_nms(logits, residuals, anchors)
            assert len(out) == expect, f"{name}: got {len(out)} boxes, want {expect}"

    def test_fuzzed_outputs_never_violate_filters(self):
        anchors = self.anchors()
        rng = np.random.default_rng(8)
        shape = (anchors.grid.grid_x, anchors.grid.grid_z, 2)
        checked = 0
        for _ in range(200):
            logits = rng.normal(-2.0, 2.5, shape)
            residuals = rng.normal(0.0, 1.0, shape + (7,))
            for box in decode_and_nms(logits, residuals, anchors):
                assert box.score >= 0.4
                assert box.length <= 30.0 and box.width <= 5.0
                assert min(box.length, box.width, box.height) >= 0.5
                checked += 1
        assert checked > 100  # the fuzz actually exercised the decode path
        report("criterion 8", f"boundary cases exact; {checked} fuzz-decoded boxes "
                              "all satisfied the probability and size filters")
