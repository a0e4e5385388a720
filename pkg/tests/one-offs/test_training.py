"""Training loop, image rendering and held-out evaluation on a tiny rig.

The paired full-length run is marked slow; pass --runslow to include it.

Run: python -m pytest tests/one-offs/test_training.py -v
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from cnerf.errors import PreconditionError
from cnerf.field import FieldArchitecture, init_params
from cnerf.models import EvalConfig, FieldConfig, SynthConfig, TrainConfig
from cnerf.synth.correspondences import CorruptionSpec, synthesize_tracks
from cnerf.synth.scene import render_ground_truth
from cnerf.synth.scenes import make_rig, make_scene
from cnerf.training import TRACE_COLUMNS, PixelPool, View, evaluate, render_image, train

NEAR, FAR = 2.0, 10.0
FIELD = FieldConfig(num_frequencies_position=2, num_frequencies_direction=1,
                    hidden_layers=1, hidden_width=16, color_width=8, activation="relu")


def _config(**overrides):
    base = dict(iterations=3, batch_rays=64, max_pairs=16, samples_per_ray=8,
                lr=5e-3, log_every=1, trace_views=1, trace_stride=2)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def rig():
    scene = make_scene("plane_sphere")
    train_cams, test_cams = make_rig(SynthConfig(width=16, height=12, n_train=2, n_test=1))

    def view(cam):
        image, depth = render_ground_truth(scene, cam)
        return View(cam.name, cam, image, depth)

    tracks = synthesize_tracks(scene, train_cams, 60, CorruptionSpec(), 1.0, np.random.default_rng(0))
    return [view(c) for c in train_cams], [view(c) for c in test_cams], tracks.correspondences


# ============================================================================
# Inputs
# ============================================================================


class TestPixelPool:
    def test_every_pixel_once(self, rig):
        train_views, _, _ = rig
        pool = PixelPool.from_views(train_views)
        assert len(pool) == 2 * 16 * 12
        assert pool.offsets == {"train_00": 0, "train_01": 192}
        np.testing.assert_allclose(np.linalg.norm(pool.directions, axis=1), 1.0)

    def test_pixel_ids_round_and_reject(self, rig):
        train_views, _, _ = rig
        pool = PixelPool.from_views(train_views)
        views = {v.name: v for v in train_views}
        uv = np.array([[2.4, 3.6], [15.2, 11.4], [16.0, 0.0], [1.0, 1.0]])
        ids = pool.pixel_ids(views, ["train_01", "train_00", "train_00", "test_00"], uv)
        np.testing.assert_array_equal(ids, [192 + 4 * 16 + 2, 11 * 16 + 15, -1, -1])

    def test_view_shape_checked(self, rig):
        train_views, _, _ = rig
        cam = train_views[0].camera
        with pytest.raises(PreconditionError):
            View("bad", cam, np.zeros((cam.height, cam.width + 1, 3)))


# ============================================================================
# Rendering
# ============================================================================


class TestRenderImage:
    def test_shapes_and_stride(self, rig):
        _, test_views, _ = rig
        params = init_params(FieldArchitecture.from_config(FIELD), seed=0)
        color, depth = render_image(params, test_views[0].camera, NEAR, FAR, M=8)
        assert color.shape == (12, 16, 3)
        assert depth.shape == (12, 16)
        color_s, depth_s = render_image(params, test_views[0].camera, NEAR, FAR, M=8, stride=4)
        assert color_s.shape == (3, 4, 3)
        np.testing.assert_allclose(depth_s, depth[::4, ::4], rtol=1e-12)

    def test_thread_count_does_not_change_pixels(self):
        from cnerf.geometry import intrinsics_from_fov, look_at

        cam = look_at((0.0, 0.6, -4.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), intrinsics_from_fov(64, 48, 50.0), 64, 48)
        params = init_params(FieldArchitecture.from_config(FIELD), seed=3)
        one = render_image(params, cam, NEAR, FAR, M=8, threads=1)
        many = render_image(params, cam, NEAR, FAR, M=8, threads=4)
        np.testing.assert_array_equal(one[0], many[0])
        np.testing.assert_array_equal(one[1], many[1])


# ============================================================================
# Training
# ============================================================================


class TestTrain:
    def test_same_seed_same_parameters(self, rig):
        train_views, _, corrs = rig
        a = train(train_views, corrs, _config(), FIELD, NEAR, FAR, seed=11)
        b = train(train_views, corrs, _config(), FIELD, NEAR, FAR, seed=11)
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())
        assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]

    def test_seed_changes_parameters(self, rig):
        train_views, _, _ = rig
        a = train(train_views, [], _config(iterations=1), FIELD, NEAR, FAR, seed=1)
        b = train(train_views, [], _config(iterations=1), FIELD, NEAR, FAR, seed=2)
        assert not np.array_equal(a.params.flatten(), b.params.flatten())

    def test_zero_weights_ignore_correspondences(self, rig):
        train_views, _, corrs = rig
        cfg = _config(lambda_pixel=0.0, lambda_depth=0.0)
        with_pairs = train(train_views, corrs, cfg, FIELD, NEAR, FAR, seed=4)
        without = train(train_views, [], cfg, FIELD, NEAR, FAR, seed=4)
        assert with_pairs.pair_count == 0
        np.testing.assert_array_equal(with_pairs.params.flatten(), without.params.flatten())
        assert all(row["L_pixel"] == 0.0 and row["L_depth"] == 0.0 for row in with_pairs.trace)

    def test_paired_run_records_trace(self, rig):
        train_views, test_views, corrs = rig
        rows = []
        result = train(train_views, corrs, _config(), FIELD, NEAR, FAR, seed=0,
                       trace_views=test_views, on_trace=rows.append)
        assert result.pair_count > 0
        assert result.iterations == 3
        assert result.state.step == 3
        assert rows == result.trace
        assert [r["iteration"] for r in rows] == [1, 2, 3]
        for row in rows:
            assert set(row) == set(TRACE_COLUMNS)
            assert math.isfinite(row["total"]) and math.isfinite(row["psnr"]) and math.isfinite(row["depth_mae"])
            assert row["total"] >= row["L_color"]

    def test_no_trace_views_gives_nan_metrics(self, rig):
        train_views, _, _ = rig
        result = train(train_views, [], _config(iterations=1), FIELD, NEAR, FAR)
        assert math.isnan(result.trace[0]["psnr"])

    def test_needs_a_view(self):
        with pytest.raises(PreconditionError):
            train([], [], _config(), FIELD, NEAR, FAR)

    @pytest.mark.slow
    def test_paired_training_reduces_loss(self, rig):
        train_views, test_views, corrs = rig
        cfg = _config(iterations=400, batch_rays=192, samples_per_ray=16, log_every=50)
        result = train(train_views, corrs, cfg, FIELD, NEAR, FAR, seed=0, trace_views=test_views)
        assert result.trace[-1]["L_color"] < result.trace[0]["L_color"]
        assert result.trace[-1]["psnr"] > result.trace[0]["psnr"]

    @pytest.mark.slow
    def test_correspondences_beat_color_only_baseline(self, rig):
        train_views, test_views, corrs = rig
        eval_config = EvalConfig(samples_per_ray=16, chamfer_stride=1, write_images=False)
        reports = {}
        for name, weights in (("paired", (0.1, 0.1)), ("baseline", (0.0, 0.0))):
            cfg = _config(iterations=600, batch_rays=192, samples_per_ray=16, log_every=600,
                          lambda_pixel=weights[0], lambda_depth=weights[1])
            result = train(train_views, corrs, cfg, FIELD, NEAR, FAR, seed=0)
            reports[name], _ = evaluate(result.params, test_views, NEAR, FAR, eval_config)
        assert reports["paired"].depth_mae <= 0.8 * reports["baseline"].depth_mae
        assert reports["paired"].psnr >= reports["baseline"].psnr


# ============================================================================
# Evaluation
# ============================================================================


class TestEvaluate:
    def test_report_covers_every_view(self, rig):
        _, test_views, _ = rig
        params = init_params(FieldArchitecture.from_config(FIELD), seed=0)
        report, renders = evaluate(params, test_views, NEAR, FAR, EvalConfig(samples_per_ray=8, chamfer_stride=2))
        assert [e["view"] for e in report.per_view] == ["test_00"]
        assert set(renders) == {"test_00"}
        assert math.isfinite(report.psnr)
        assert -1.0 <= report.ssim <= 1.0
        assert report.depth_mae >= 0.0
        assert report.chamfer_l1 >= 0.0
        assert report.to_dict()["per_view"][0]["view"] == "test_00"

    def test_views_without_depth_skip_geometry(self, rig):
        _, test_views, _ = rig
        bare = [View(v.name, v.camera, v.image) for v in test_views]
        params = init_params(FieldArchitecture.from_config(FIELD), seed=0)
        report, _ = evaluate(params, bare, NEAR, FAR, EvalConfig(samples_per_ray=8))
        assert math.isnan(report.depth_mae)
        assert math.isnan(report.chamfer_l1)
