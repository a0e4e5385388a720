"""Analytic scenes, the camera rig, synthetic correspondences and quality metrics.

Run: python -m pytest tests/one-offs/test_synth_metrics.py -v
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from cnerf.corres import PixelMap
from cnerf.errors import DomainError, InputFormatError, PreconditionError
from cnerf.geometry import intrinsics_from_fov, look_at, projected_ray_distance
from cnerf.models import SCENE_NAMES, SynthConfig
from cnerf.synth.correspondences import (
    AUGMENTATION_TRANSFORMS,
    CorruptionSpec,
    synthesize_augmented_sets,
    synthesize_correspondences,
    synthesize_tracks,
    to_augmented,
)
from cnerf.synth.metrics import chamfer_l1, depth_mae, depth_to_points, psnr, ssim
from cnerf.synth.scene import (
    AnalyticScene,
    Box,
    Rectangle,
    Sphere,
    Texture,
    hit_points,
    render_ground_truth,
)
from cnerf.synth.scenes import BACKDROP_Z, make_rig, make_scene

Z_AXIS = np.array([[0.0, 0.0, 1.0]])


@pytest.fixture
def rig():
    train, test = make_rig(SynthConfig(n_train=3, n_test=2))
    return train, test


# ============================================================================
# Primitives and scenes
# ============================================================================


class TestPrimitives:
    def test_sphere_front_hit(self):
        s = Sphere((0.0, 0.0, 0.0), 1.0)
        assert s.intersect(np.array([[0.0, 0.0, -5.0]]), Z_AXIS)[0] == pytest.approx(4.0)

    def test_sphere_from_inside_hits_far_side(self):
        s = Sphere((0.0, 0.0, 0.0), 1.0)
        assert s.intersect(np.zeros((1, 3)), Z_AXIS)[0] == pytest.approx(1.0)

    def test_sphere_miss(self):
        s = Sphere((0.0, 0.0, 0.0), 1.0)
        assert math.isinf(s.intersect(np.array([[2.0, 0.0, -5.0]]), Z_AXIS)[0])

    def test_rectangle_extent(self):
        r = Rectangle((0.0, 0.0, 2.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0), 1.0, 0.5)
        origins = np.array([[0.5, 0.4, 0.0], [0.5, 0.6, 0.0], [1.5, 0.0, 0.0]])
        t = r.intersect(origins, np.repeat(Z_AXIS, 3, axis=0))
        assert t[0] == pytest.approx(2.0)
        assert math.isinf(t[1]) and math.isinf(t[2])

    def test_rectangle_parallel_ray_misses(self):
        r = Rectangle((0.0, 0.0, 2.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0), 1.0, 1.0)
        assert math.isinf(r.intersect(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))[0])

    def test_box_outside_and_inside(self):
        b = Box((-1.0, -1.0, 1.0), (1.0, 1.0, 3.0))
        origins = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
        t = b.intersect(origins, np.repeat(Z_AXIS, 2, axis=0))
        np.testing.assert_allclose(t, [1.0, 1.0])

    def test_invalid_primitives(self):
        with pytest.raises(DomainError):
            Sphere((0.0, 0.0, 0.0), 0.0)
        with pytest.raises(DomainError):
            Box((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))
        with pytest.raises(DomainError):
            Rectangle((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, 2.0), 1.0, 1.0)


class TestTexture:
    def test_checker_alternates(self):
        tex = Texture("checker", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0)
        colors = tex.albedo(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]))
        np.testing.assert_array_equal(colors, [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])

    def test_albedo_stays_in_range(self):
        P = np.random.default_rng(0).uniform(-3, 3, size=(500, 3))
        for kind in ("solid", "stripes", "rings"):
            colors = Texture(kind, (0.9, 0.1, 0.5), (0.2, 0.7, 0.0), 0.3).albedo(P)
            assert colors.min() >= 0.0 and colors.max() <= 1.0

    def test_unknown_kind(self):
        with pytest.raises(DomainError):
            Texture("marble")


class TestAnalyticScene:
    def test_nearest_primitive_wins(self):
        scene = make_scene("plane_sphere")
        t, idx = scene.intersect(np.array([[0.0, 0.0, -5.0], [3.0, 0.0, -5.0]]), np.repeat(Z_AXIS, 2, axis=0))
        np.testing.assert_allclose(t, [4.0, 5.0 + BACKDROP_Z])
        np.testing.assert_array_equal(idx, [0, 1])

    def test_miss_gets_background(self):
        scene = AnalyticScene("empty", [Sphere((0.0, 0.0, 0.0), 1.0)], background=(0.1, 0.2, 0.3))
        color, t = scene.shade(np.array([[5.0, 5.0, -5.0]]), Z_AXIS)
        np.testing.assert_allclose(color[0], [0.1, 0.2, 0.3])
        assert math.isinf(t[0])

    def test_visibility_respects_occlusion(self, rig):
        scene = make_scene("plane_sphere")
        cam = rig[0][1]
        front = cam.center / np.linalg.norm(cam.center)
        behind = -front
        seen = scene.visible_from(cam, np.array([front, behind]))
        np.testing.assert_array_equal(seen, [True, False])

    def test_invalid_description_names_source(self):
        with pytest.raises(InputFormatError, match="scene.json"):
            AnalyticScene.from_dict({"primitives": [{"type": "cone"}]}, source="scene.json")

    def test_description_preserves_intersections(self):
        scene = make_scene("three_boxes")
        again = AnalyticScene.from_dict(scene.to_dict())
        rng = np.random.default_rng(1)
        origins = np.tile([0.0, 0.2, -4.0], (50, 1))
        d = np.column_stack([rng.uniform(-0.4, 0.4, 50), rng.uniform(-0.3, 0.3, 50), np.ones(50)])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        np.testing.assert_allclose(scene.intersect(origins, d)[0], again.intersect(origins, d)[0])

    @pytest.mark.parametrize("name", SCENE_NAMES)
    def test_every_named_scene_builds(self, name):
        scene = make_scene(name)
        assert scene.name == name
        assert len(scene.primitives) >= 2

    def test_unknown_scene(self):
        with pytest.raises(PreconditionError, match="plane_sphere"):
            make_scene("teapot")


class TestGroundTruth:
    def test_principal_ray_hits_sphere_front(self, rig):
        scene = make_scene("plane_sphere")
        cam = rig[0][1]
        K = cam.intrinsics
        X, hit = hit_points(scene, cam, np.array([[K[0, 2], K[1, 2]]]))
        assert hit[0]
        np.testing.assert_allclose(X[0], cam.center / np.linalg.norm(cam.center), atol=1e-9)

    def test_render_shapes_and_finite_depth(self, rig):
        scene = make_scene("plane_sphere")
        image, depth = render_ground_truth(scene, rig[1][0])
        assert image.shape == (48, 64, 3)
        assert depth.shape == (48, 64)
        assert np.all(np.isfinite(depth))
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_threads_do_not_change_pixels(self, rig):
        scene = make_scene("horns")
        one = render_ground_truth(scene, rig[0][0], threads=1)
        many = render_ground_truth(scene, rig[0][0], threads=4)
        np.testing.assert_array_equal(one[0], many[0])
        np.testing.assert_array_equal(one[1], many[1])


class TestRig:
    def test_names_and_counts(self, rig):
        train, test = rig
        assert [c.name for c in train] == ["train_00", "train_01", "train_02"]
        assert [c.name for c in test] == ["test_00", "test_01"]

    def test_cameras_on_the_arc_look_at_origin(self, rig):
        for cam in rig[0] + rig[1]:
            c = cam.center
            assert math.hypot(c[0], c[2]) == pytest.approx(4.0)
            assert c[1] == pytest.approx(0.6)
            pixels, depth = cam.project_points(np.zeros((1, 3)))
            np.testing.assert_allclose(pixels[0], [31.5, 23.5], atol=1e-9)
            assert depth[0] > 0

    def test_test_views_sit_between_training_views(self, rig):
        train, test = rig
        angle = lambda cam: math.degrees(math.atan2(cam.center[0], -cam.center[2]))
        train_angles = [angle(c) for c in train]
        assert train_angles[0] == pytest.approx(-20.0)
        assert train_angles[-1] == pytest.approx(20.0)
        for cam in test:
            assert -20.0 < angle(cam) < 20.0
            assert all(abs(angle(cam) - a) > 1e-6 for a in train_angles)


# ============================================================================
# Synthetic correspondences
# ============================================================================


class TestCorruptionSpec:
    def test_confidence_model(self):
        spec = CorruptionSpec(confidence_falloff_px=8.0)
        np.testing.assert_allclose(spec.confidence(np.array([0.0, 2.0, 4.0, 20.0])), [1.0, 0.75, 0.5, 0.5])

    @pytest.mark.parametrize("kwargs", [{"pixel_noise_std": -1.0}, {"outlier_fraction": 1.0},
                                        {"confidence_falloff_px": 0.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(DomainError):
            CorruptionSpec(**kwargs)


class TestSynthesizeCorrespondences:
    def test_clean_pairs_are_consistent(self, rig):
        scene = make_scene("plane_sphere")
        cam_q, cam_s = rig[0][0], rig[0][1]
        result = synthesize_correspondences(scene, cam_q, cam_s, 200, CorruptionSpec(), np.random.default_rng(0))
        assert result.covisible
        assert len(result.correspondences) > 50
        for c in result.correspondences[:40]:
            assert (c.image_q, c.image_s) == ("train_00", "train_01")
            assert c.confidence == 1.0
            assert projected_ray_distance(cam_q, cam_s, c.p_q, c.p_s) < 1e-6

    def test_outliers_are_counted(self, rig):
        scene = make_scene("plane_sphere")
        spec = CorruptionSpec(pixel_noise_std=1.0, outlier_fraction=0.5)
        result = synthesize_correspondences(scene, rig[0][0], rig[0][2], 300, spec, np.random.default_rng(1))
        assert 0 < result.outliers < len(result.correspondences)
        assert all(0.5 <= c.confidence <= 1.0 for c in result.correspondences)
        assert all(rig[0][2].contains(c.p_s.u, c.p_s.v) for c in result.correspondences)

    def test_no_shared_surface_warns(self, rig, isolate_debug_log):
        scene = make_scene("plane_sphere")
        K = intrinsics_from_fov(64, 48, 50.0)
        away = look_at((0.0, 0.6, -4.0), (0.0, 0.6, -10.0), (0.0, 1.0, 0.0), K, 64, 48, "away")
        result = synthesize_correspondences(scene, rig[0][0], away, 100, CorruptionSpec(), np.random.default_rng(2))
        assert not result.covisible
        assert result.correspondences == []
        assert "share no visible surface" in isolate_debug_log.read_text()


class TestSynthesizeTracks:
    def test_full_recall_reports_every_view_pair(self, rig):
        scene = make_scene("plane_sphere")
        tracks = synthesize_tracks(scene, rig[0], 80, CorruptionSpec(), 1.0, np.random.default_rng(3))
        assert tracks.tracks
        assert all(len(t.observations) >= 2 for t in tracks.tracks)
        expected = sum(len(t.observations) * (len(t.observations) - 1) // 2 for t in tracks.tracks)
        assert len(tracks.correspondences) == expected
        assert tracks.outliers == 0
        assert all(c.image_q < c.image_s for c in tracks.correspondences)

    def test_partial_recall_drops_pairs(self, rig):
        scene = make_scene("plane_sphere")
        full = synthesize_tracks(scene, rig[0], 80, CorruptionSpec(), 1.0, np.random.default_rng(4))
        half = synthesize_tracks(scene, rig[0], 80, CorruptionSpec(), 0.5, np.random.default_rng(4))
        assert 0 < len(half.correspondences) < len(full.correspondences)

    def test_recall_must_be_positive(self, rig):
        with pytest.raises(DomainError):
            synthesize_tracks(make_scene("plane_sphere"), rig[0], 10, CorruptionSpec(), 0.0,
                              np.random.default_rng(0))

    def test_seeded(self, rig):
        scene = make_scene("three_boxes")
        a = synthesize_tracks(scene, rig[0], 40, CorruptionSpec(pixel_noise_std=0.5), 0.7, np.random.default_rng(9))
        b = synthesize_tracks(scene, rig[0], 40, CorruptionSpec(pixel_noise_std=0.5), 0.7, np.random.default_rng(9))
        assert a.correspondences == b.correspondences


class TestAugmentedSets:
    def test_augmented_coordinates_map_back(self, rig):
        scene = make_scene("plane_sphere")
        cams = {c.name: c for c in rig[0]}
        tracks = synthesize_tracks(scene, rig[0], 30, CorruptionSpec(), 1.0, np.random.default_rng(5))
        c = tracks.correspondences[0]
        pm = PixelMap(flip=True, scale=2.0, swap=True)
        aug = to_augmented(c, pm, cams)
        assert (aug.image_q, aug.image_s) == (c.image_s, c.image_q)
        u, v = pm.to_original(aug.p_s.u, aug.p_s.v, cams[aug.image_s].width)
        assert (u, v) == pytest.approx((c.p_q.u, c.p_q.v))

    def test_one_set_per_transform(self, rig):
        scene = make_scene("plane_sphere")
        rng = np.random.default_rng(6)
        tracks = synthesize_tracks(scene, rig[0], 30, CorruptionSpec(), 0.7, rng)
        sets = synthesize_augmented_sets(tracks, rig[0], AUGMENTATION_TRANSFORMS, 0.7, CorruptionSpec(), rng,
                                         identity_set=tracks.correspondences)
        assert len(sets) == len(AUGMENTATION_TRANSFORMS)
        assert sets[0] == tracks.correspondences
        assert all(c.image_q > c.image_s for c in sets[2])


# ============================================================================
# Metrics
# ============================================================================


class TestPsnr:
    def test_identical_images(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == math.inf

    def test_constant_offset(self):
        img = np.full((8, 8, 3), 0.5)
        assert psnr(img, img + 0.1) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(PreconditionError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    def test_identical_images(self):
        img = np.random.default_rng(1).random((48, 64, 3))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_noise_lowers_similarity(self):
        rng = np.random.default_rng(2)
        img = rng.random((48, 64, 3))
        noisy = np.clip(img + rng.normal(scale=0.3, size=img.shape), 0, 1)
        value = ssim(img, noisy)
        assert -1.0 <= value < 0.9

    def test_small_and_single_channel(self):
        img = np.random.default_rng(3).random((6, 6))
        assert ssim(img, img) == pytest.approx(1.0)


class TestDepthMetrics:
    def test_depth_mae_is_scaled_by_far(self):
        gt = np.full((4, 4), 3.0)
        pred = gt + 0.5
        mask = np.ones((4, 4), dtype=bool)
        mask[0] = False
        pred[0] = 100.0
        assert depth_mae(pred, gt, mask, far=10.0) == pytest.approx(0.05)

    def test_empty_mask(self):
        assert math.isnan(depth_mae(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), 10.0))

    def test_far_must_be_positive(self):
        with pytest.raises(DomainError):
            depth_mae(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2), dtype=bool), 0.0)

    def test_chamfer_of_self_and_shifted_cloud(self):
        grid = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0), np.arange(5.0)), axis=-1).reshape(-1, 3)
        assert chamfer_l1(grid, grid) == 0.0
        assert chamfer_l1(grid, grid + [0.0, 0.0, 0.01]) == pytest.approx(0.01)

    def test_chamfer_needs_points(self):
        with pytest.raises(PreconditionError):
            chamfer_l1(np.zeros((0, 3)), np.zeros((3, 3)))

    def test_depth_to_points(self, two_cameras):
        cam = two_cameras[0]
        depth = np.full((48, 64), 2.0)
        depth[0, 0] = np.inf
        mask = np.zeros((48, 64), dtype=bool)
        mask[:2, :3] = True
        points = depth_to_points(cam, depth, mask)
        assert points.shape == (5, 3)
        np.testing.assert_allclose(np.linalg.norm(points - cam.center, axis=1), 2.0)
