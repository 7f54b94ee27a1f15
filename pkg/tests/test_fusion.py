import json
import math

import numpy as np
import pytest

from p4d.anchors import AnchorGrid, encode_residuals
from p4d.autodiff import ParamSet, Tape, Tensor, max_relative_error, ops
from p4d.boxes import DetectionBox
from p4d.fusion import (
    FrameSample,
    Model,
    ModelConfig,
    TowerConfig,
    decode_and_nms,
    fusion_layer_gradient_check,
    multi_camera_feature,
    sample_projected_feature,
)
from p4d.geometry import CameraModel, RigidTransform
from p4d.pillars import GridConfig, TimedPointCloud, pillarize


def small_grid(n=16, extent=8.0):
    return GridConfig(
        x_range=(-extent, extent), z_range=(-extent, extent),
        grid_x=n, grid_z=n, max_pillars=64, max_points_per_pillar=16,
    )


def cloud_at(points, intensity=0.6, t=-0.1):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    feats = np.column_stack([np.full(len(pts), intensity), np.full(len(pts), t)])
    return TimedPointCloud(pts, feats)


def forward_camera(size=32, fov_deg=90.0):
    f = (size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraModel.pinhole(f, -f, size / 2.0, size / 2.0, size, size)


class TestTowers:
    def test_still_tower_halving(self):
        cfg = ModelConfig(
            grid=small_grid(), streams=[TowerConfig("still", 64, channels=(4, 8, 16, 32))],
            fusion_mode="projection", connection_mode="static",
            camera_native_resolution=64,
        )
        model = Model(cfg, seed=0)
        pyr = model.tower_forward(None, 0, np.zeros((64, 64, 3)))
        assert [m.value.shape[0] for m in pyr.maps] == [32, 16, 8, 4]
        assert pyr.downscales == [2, 4, 8, 16]

    def test_video_tower_pools_time(self):
        cfg = ModelConfig(
            grid=small_grid(),
            streams=[TowerConfig("video", 64, frames=16, channels=(4, 8, 16, 32))],
            fusion_mode="projection", connection_mode="static",
            camera_native_resolution=64,
        )
        model = Model(cfg, seed=0)
        pyr = model.tower_forward(None, 0, np.zeros((16, 64, 64, 3)))
        # every pyramid map is 2D even though early blocks carry time
        assert all(m.value.ndim == 3 for m in pyr.maps)
        assert [m.value.shape[0] for m in pyr.maps] == [32, 16, 8, 4]

    def test_input_shape_validated(self):
        cfg = ModelConfig(
            grid=small_grid(),
            streams=[TowerConfig("video", 64, frames=16, channels=(4, 8))],
            fusion_mode="projection", connection_mode="static",
            camera_native_resolution=64,
        )
        model = Model(cfg, seed=0)
        with pytest.raises(ValueError, match="expects input"):
            model.tower_forward(None, 0, np.zeros((8, 64, 64, 3)))

    def test_seeds_change_params_not_shapes(self):
        cfg = ModelConfig(
            grid=small_grid(), streams=[TowerConfig("still", 32, channels=(4, 8))],
            fusion_mode="projection", connection_mode="static",
            camera_native_resolution=32,
        )
        a, b = Model(cfg, seed=1), Model(cfg, seed=2)
        assert a.params.names() == b.params.names()
        wa = a.params["tower0.block0.spatial.w"].value
        wb = b.params["tower0.block0.spatial.w"].value
        assert wa.shape == wb.shape
        assert not np.array_equal(wa, wb)


class TestProjectionSampling:
    def test_behind_camera_returns_zeros(self):
        cam = forward_camera()
        fmap = np.random.default_rng(0).normal(size=(8, 8, 5))
        out = sample_projected_feature(fmap, cam, (0.0, 0.0, -4.0), downscale=4)
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_exact_pixel_one_hot(self):
        cam = forward_camera(size=32)
        fmap = np.zeros((8, 8, 4))
        fmap[3, 5] = [0.0, 1.0, 0.0, 0.0]
        # pick a 3D point projecting into map cell (row 3, col 5): image pixel
        # (u, v) = (22, 14) -> map (14/4, 22/4) = (3.5, 5.5)
        f = cam.K[0, 0]
        z = 10.0
        x = (22.0 - 16.0) * z / f
        y = -(14.0 - 16.0) * z / f  # fy is negative
        out = sample_projected_feature(fmap, cam, (x, y, z), downscale=4)
        np.testing.assert_allclose(out, [0.0, 1.0, 0.0, 0.0])

    def test_two_of_three_cameras_summed(self):
        left = CameraModel.pinhole(16, -16, 16, 16, 32, 32,
                                   E=RigidTransform.from_yaw(-1.2).invert().matrix)
        mid = forward_camera(32)
        right = CameraModel.pinhole(16, -16, 16, 16, 32, 32,
                                    E=RigidTransform.from_yaw(1.2).invert().matrix)
        rng = np.random.default_rng(1)
        fmaps = [rng.normal(size=(8, 8, 3)) for _ in range(3)]
        # azimuth ~35 deg: inside the forward camera's 45 deg half-FOV and
        # inside the right camera's view (axis at 68.8 deg), not the left's
        point = (7.0, 0.0, 10.0)
        singles = [
            sample_projected_feature(fm, cam, point, 4)
            for fm, cam in zip(fmaps, [left, mid, right])
        ]
        assert np.array_equal(singles[0], np.zeros(3))  # left cannot see it
        assert np.abs(singles[1]).sum() > 0 and np.abs(singles[2]).sum() > 0
        total = multi_camera_feature(fmaps, [left, mid, right], point, 4)
        np.testing.assert_allclose(total, singles[1] + singles[2])

    def test_bilinear_interpolates(self):
        cam = forward_camera(size=32)
        fmap = np.zeros((8, 8, 1))
        fmap[4, 4] = 2.0
        out_n = sample_projected_feature(fmap, cam, (0.5, -0.5, 10.0), 4, bilinear=False)
        out_b = sample_projected_feature(fmap, cam, (0.5, -0.5, 10.0), 4, bilinear=True)
        assert out_n[0] in (0.0, 2.0)
        assert 0.0 <= out_b[0] <= 2.0


class TestConnections:
    def make_model(self, mode, streams=None, grid=None):
        streams = streams or [TowerConfig("still", 32, channels=(4, 8, 8, 8))]
        cfg = ModelConfig(
            grid=grid or small_grid(), streams=streams, fusion_mode="projection",
            connection_mode=mode, camera_native_resolution=32,
        )
        return Model(cfg, seed=0), cfg

    def sample_for(self, model, pts=None, rig=None):
        grid = model.config.grid
        cloud = cloud_at(pts if pts is not None else [[0.5, 0.5, 4.0], [-2.0, 0.5, 6.0]])
        pillars = pillarize(cloud, grid, seed=0)
        rig = rig if rig is not None else [forward_camera(32)]
        imgs = [[np.random.default_rng(3).random((32, 32, 3)) for _ in rig]
                for _ in model.config.streams]
        return FrameSample(pillars, imgs, rig)

    def test_candidate_counts(self):
        model, _ = self.make_model("static")
        assert model.candidate_count(0) == 4
        two_streams = [
            TowerConfig("still", 32, channels=(4, 8, 8, 8)),
            TowerConfig("video", 32, frames=8, channels=(4, 8, 8, 8)),
        ]
        model2, _ = self.make_model("dynamic", streams=two_streams)
        assert model2.candidate_count(0) == 8  # union of both pyramids

    def test_fixed_mode_uses_same_index_map(self):
        model, _ = self.make_model(None)
        assert model.candidate_count(0) == 1
        sample = self.sample_for(model)
        _, _, aux = model.forward(sample)
        for site, w in aux["connection_weights"].items():
            np.testing.assert_allclose(w, [1.0])  # softmax of a singleton

    def test_static_weights_sum_to_one(self):
        model, _ = self.make_model("static")
        # perturb the raw connection logits away from uniform
        model.params["conn.site0.w"].value[:] = [2.0, -1.0, 0.5, 0.0]
        sample = self.sample_for(model)
        _, _, aux = model.forward(sample)
        for site, w in aux["connection_weights"].items():
            assert w.shape == (4,)
            assert abs(w.sum() - 1.0) < 1e-6

    def test_dynamic_weights_per_pillar_sum_to_one(self):
        model, _ = self.make_model("dynamic")
        sample = self.sample_for(model)
        _, _, aux = model.forward(sample)
        for site, w in aux["connection_weights"].items():
            assert w.shape[0] == sample.pillars.num_pillars
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_dynamic_weights_are_function_of_cell_feature(self):
        # two pillars falling into the same coarse cell share their weights:
        # base cells (8,12) and (9,12) both map to site-0 cell (4,6)
        model, _ = self.make_model("dynamic")
        pts = [[0.1, 0.5, 4.1], [1.1, 0.5, 4.1], [-6.0, 0.5, 7.0]]
        sample = self.sample_for(model, pts=pts)
        assert sample.pillars.num_pillars == 3
        _, _, aux = model.forward(sample)
        cells = sample.pillars.cell_indices[:3] // 2  # site-0 cells
        w = aux["connection_weights"][0]
        groups: dict = {}
        for i in range(3):
            groups.setdefault(tuple(cells[i]), []).append(i)
        pair = next(v for v in groups.values() if len(v) == 2)
        np.testing.assert_allclose(w[pair[0]], w[pair[1]], atol=1e-12)
        lone = next(v for v in groups.values() if len(v) == 1)[0]
        assert not np.allclose(w[lone], w[pair[0]])

    def test_dynamic_row_selector_hand_softmax(self):
        # mixing weights from a hand-built row-selector: logits equal the
        # first two cell-feature entries, softmax evaluated by hand
        cells = Tensor(np.array([[3.0, 1.0], [-3.0, -1.0]]))
        omega = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        logits = ops.affine(None, cells, omega)
        w = ops.softmax(None, logits, axis=-1).value
        expect_row0 = np.exp([3.0, 1.0]) / np.exp([3.0, 1.0]).sum()
        expect_row1 = np.exp([-3.0, -1.0]) / np.exp([-3.0, -1.0]).sum()
        np.testing.assert_allclose(w[0], expect_row0, atol=1e-12)
        np.testing.assert_allclose(w[1], expect_row1, atol=1e-12)
        assert not np.allclose(w[0], w[1])

    def test_b_equal_one_reduces_to_concat(self):
        feats = Tensor(np.random.default_rng(0).normal(size=(1, 4, 3)))
        w = ops.softmax(None, Tensor(np.array([1.7])), axis=-1)
        mixed = ops.mix_static(None, feats, w)
        np.testing.assert_allclose(mixed.value, feats.value[0], atol=1e-12)

    def test_static_equal_weights_average(self):
        feats = Tensor(np.random.default_rng(1).normal(size=(4, 5, 3)))
        w = ops.softmax(None, Tensor(np.zeros(4)), axis=-1)
        mixed = ops.mix_static(None, feats, w)
        np.testing.assert_allclose(mixed.value, feats.value.mean(axis=0), atol=1e-12)

    def test_out_of_view_pillars_get_zero_rgb(self):
        model, cfg = self.make_model("dynamic")
        pts = [[0.5, 0.5, -4.0], [-2.0, 0.5, -6.0]]  # behind the forward camera
        sample = self.sample_for(model, pts=pts)
        _, _, aux = model.forward(sample)
        base = cfg.backbone_channels
        for site, fm in enumerate(aux["backbone_maps"]):
            extra = fm[..., base[site]:]
            assert np.abs(extra).sum() == 0.0


class TestAssembly:
    def test_pc_only_model(self):
        cfg = ModelConfig(grid=small_grid())
        model = Model(cfg, seed=0)
        cloud = cloud_at([[0.5, 0.5, 4.0]])
        sample = FrameSample(pillarize(cloud, cfg.grid, seed=0), [], [])
        logits, residuals, aux = model.forward(sample)
        assert logits.value.shape == (16, 16, 2)
        assert residuals.value.shape == (16, 16, 2, 7)

    def test_projection_requires_rig(self):
        cfg = ModelConfig(
            grid=small_grid(), streams=[TowerConfig("still", 32, channels=(4,))],
            fusion_mode="projection", connection_mode="static",
            camera_native_resolution=32,
        )
        model = Model(cfg, seed=0)
        cloud = cloud_at([[0.5, 0.5, 4.0]])
        sample = FrameSample(
            pillarize(cloud, cfg.grid, seed=0), [[np.zeros((32, 32, 3))]], []
        )
        with pytest.raises(ValueError, match="camera rig"):
            model.forward(sample)

    def test_full_forward_deterministic(self):
        cfg = ModelConfig(
            grid=small_grid(), streams=[TowerConfig("still", 32, channels=(4, 8))],
            fusion_mode="projection", connection_mode="dynamic",
            camera_native_resolution=32,
        )
        model = Model(cfg, seed=5)
        rng = np.random.default_rng(0)
        cloud = cloud_at(rng.uniform(-6, 6, (30, 3)) * [1, 0.1, 1] + [0, 0.5, 0])
        sample = FrameSample(
            pillarize(cloud, cfg.grid, seed=0),
            [[rng.random((32, 32, 3))]],
            [forward_camera(32)],
        )
        a = model.forward(sample)[0].value
        b = model.forward(sample)[0].value
        assert np.array_equal(a, b)

    def test_config_json_round_trip(self, tmp_path):
        cfg = ModelConfig(
            grid=small_grid(),
            streams=[TowerConfig("video", 48, frames=8, channels=(4, 8, 8, 8))],
            fusion_mode="projection", connection_mode="dynamic",
            camera_native_resolution=96,
        )
        path = tmp_path / "model.json"
        cfg.save(path)
        loaded = ModelConfig.load(path)
        assert loaded.to_dict() == cfg.to_dict()

    def test_bad_configs_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(fusion_mode="projection")  # no streams
        with pytest.raises(ValueError):
            ModelConfig(fusion_mode="nope")
        with pytest.raises(ValueError):
            TowerConfig("maybe", 32)
        with pytest.raises(ValueError):
            ModelConfig(
                streams=[TowerConfig("still", 40)], fusion_mode="spatial_avg",
                camera_native_resolution=96,
            )


class TestBaselines:
    def test_spatial_avg_constant_map_everywhere(self):
        cfg = ModelConfig(
            grid=small_grid(), streams=[TowerConfig("still", 8, channels=(2,))],
            fusion_mode="spatial_avg", fusion_width=2,
            camera_native_resolution=8,
        )
        model = Model(cfg, seed=0)
        img = np.full((8, 8, 3), 0.5)
        cloud = cloud_at([[0.5, 0.5, 4.0]])
        sample = FrameSample(pillarize(cloud, cfg.grid, seed=0), [[img]], [])
        _, _, aux = model.forward(sample)
        extra = aux["backbone_maps"][0][..., cfg.backbone_channels[0]:]
        first = extra[0, 0]
        assert np.abs(extra - first).max() < 1e-12  # identical at every cell

    def test_flatten_vector_layout(self):
        # 2x2 single-channel final map [[a,b],[c,d]] broadcast as (a,b,c,d)
        cfg = ModelConfig(
            grid=small_grid(), streams=[TowerConfig("still", 4, channels=(1,))],
            fusion_mode="flatten", flatten_channels=1,
            camera_native_resolution=8,
        )
        model = Model(cfg, seed=0)
        model.params["flatten.s0.w"].value[:] = [[1.0]]  # identity adapter
        img = np.zeros((4, 4, 3))
        cloud = cloud_at([[0.5, 0.5, 4.0]])
        sample = FrameSample(pillarize(cloud, cfg.grid, seed=0), [[img]], [])
        _, _, aux = model.forward(sample)
        pyr = model.tower_forward(None, 0, img)
        final = pyr.maps[-1].value[..., 0]
        a, b, c, d = final[0, 0], final[0, 1], final[1, 0], final[1, 1]
        extra = aux["backbone_maps"][0][..., cfg.backbone_channels[0]:]
        np.testing.assert_allclose(extra[3, 7], [a, b, c, d], atol=1e-12)
        np.testing.assert_allclose(extra[0, 0], [a, b, c, d], atol=1e-12)

    def test_baselines_run_without_cameras(self):
        # no CameraModel ever reaches the geometry-free paths
        for mode in ("spatial_avg", "flatten"):
            cfg = ModelConfig(
                grid=small_grid(), streams=[TowerConfig("still", 8, channels=(2, 4))],
                fusion_mode=mode, camera_native_resolution=8,
            )
            model = Model(cfg, seed=0)
            cloud = cloud_at([[0.5, 0.5, 4.0]])
            sample = FrameSample(
                pillarize(cloud, cfg.grid, seed=0),
                [[np.random.default_rng(0).random((8, 8, 3))]],
                [],  # empty rig
            )
            logits, _, _ = model.forward(sample)
            assert logits.value.shape == (16, 16, 2)


class TestHeadAndDecode:
    def anchors(self):
        return AnchorGrid(small_grid())

    def test_zero_params_give_half_scores(self):
        cfg = ModelConfig(grid=small_grid())
        model = Model(cfg, seed=0)
        for t in model.params.tensors():
            t.value[:] = 0.0
        cloud = cloud_at([[0.5, 0.5, 4.0]])
        sample = FrameSample(pillarize(cloud, cfg.grid, seed=0), [], [])
        logits, residuals, _ = model.forward(sample)
        assert np.array_equal(logits.value, np.zeros_like(logits.value))
        scores = 1.0 / (1.0 + np.exp(-logits.value))
        np.testing.assert_allclose(scores, 0.5)

    def test_decode_keeps_confident_box(self):
        anchors = self.anchors()
        logits = np.full((16, 16, 2), -20.0)
        residuals = np.zeros((16, 16, 2, 7))
        logits[8, 8, 0] = math.log(0.9 / 0.1)
        out = decode_and_nms(logits, residuals, anchors)
        assert len(out) == 1
        assert out[0].score == pytest.approx(0.9, abs=1e-6)

    def test_decode_filters_low_scores(self):
        anchors = self.anchors()
        logits = np.full((16, 16, 2), -20.0)
        logits[4, 4, 0] = math.log(0.39 / 0.61)
        out = decode_and_nms(logits, np.zeros((16, 16, 2, 7)), anchors)
        assert out == []
        logits[4, 4, 0] = math.log(0.41 / 0.59)
        assert len(decode_and_nms(logits, np.zeros((16, 16, 2, 7)), anchors)) == 1

    def test_nms_suppresses_duplicates(self):
        anchors = self.anchors()
        logits = np.full((16, 16, 2), -20.0)
        residuals = np.zeros((16, 16, 2, 7))
        logits[8, 8, 0] = math.log(0.9 / 0.1)
        logits[8, 8, 1] = math.log(0.8 / 0.2)
        # same cell, both anchors decode near-identical boxes after zero
        # residuals except yaw bin; force identical yaw via residual
        residuals[8, 8, 1, 6] = math.sin(0.0 - math.pi / 4)  # rotate bin 2 to yaw 0
        out = decode_and_nms(logits, residuals, anchors, iou_threshold=0.5)
        assert len(out) == 1
        assert out[0].score == pytest.approx(0.9, abs=1e-6)

    def test_size_filters(self):
        anchors = self.anchors()
        diag = anchors.diag
        base = np.full((16, 16, 2), -20.0)
        cases = [
            {"dl": math.log(31.0 / 4.7), "why": "length > 30"},
            {"dw": math.log(5.5 / 2.1), "why": "width > 5"},
            {"dl": math.log(0.4 / 4.7), "why": "length < 0.5"},
            {"dw": math.log(0.3 / 2.1), "why": "width < 0.5"},
            {"dh": math.log(0.2 / 1.7), "why": "height < 0.5"},
        ]
        for case in cases:
            logits = base.copy()
            logits[5, 5, 0] = 4.0
            residuals = np.zeros((16, 16, 2, 7))
            residuals[5, 5, 0, 3] = case.get("dl", 0.0)
            residuals[5, 5, 0, 4] = case.get("dw", 0.0)
            residuals[5, 5, 0, 5] = case.get("dh", 0.0)
            out = decode_and_nms(logits, residuals, anchors)
            assert out == [], case["why"]

    def test_iou_threshold_validated(self):
        with pytest.raises(ValueError):
            decode_and_nms(np.zeros((16, 16, 2)), np.zeros((16, 16, 2, 7)),
                           self.anchors(), iou_threshold=1.5)


class TestGradients:
    def test_fusion_layer_passes_gate(self):
        err = fusion_layer_gradient_check(trials=4, seed=0)
        assert err < 1e-4, f"fusion layer gradient error {err:.2e}"

    def test_end_to_end_toy_model_gradient(self):
        grid = GridConfig(
            x_range=(-4, 4), z_range=(-4, 4), grid_x=8, grid_z=8,
            max_pillars=8, max_points_per_pillar=4,
        )
        cfg = ModelConfig(
            grid=grid, pseudo_channels=3, backbone_channels=(3, 4),
            backbone_repeats=(1, 1), upsample_channels=3, fusion_width=2,
            streams=[TowerConfig("still", 8, channels=(2, 3))],
            fusion_mode="projection", connection_mode="dynamic",
            camera_native_resolution=8,
        )
        model = Model(cfg, seed=3)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-3, 3, (6, 3)) * [1, 0.1, 1] + [0, 0.5, 0]
        pillars = pillarize(cloud_at(pts), grid, seed=0)
        img = rng.random((8, 8, 3))
        sample = FrameSample(pillars, [[img]], [forward_camera(8)])
        proj_l = rng.normal(size=(8, 8, 2))
        proj_r = rng.normal(size=(8, 8, 2, 7))

        def run(tape):
            logits, residuals, _ = model.forward(sample, tape)
            a = ops.affine(tape, ops.reshape(tape, logits, (1, -1)),
                           Tensor(proj_l.reshape(-1, 1)))
            b = ops.affine(tape, ops.reshape(tape, residuals, (1, -1)),
                           Tensor(proj_r.reshape(-1, 1)))
            return ops.reshape(tape, ops.add(tape, a, b), ())

        err = max_relative_error(run, model.params.tensors())
        assert err < 1e-3, f"end-to-end gradient error {err:.2e}"
