"""Stratified sampling, alpha compositing and the three training losses.

Run: python -m pytest tests/one-offs/test_render_losses.py -v
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from cnerf import tape as T
from cnerf.corres import Correspondence
from cnerf.errors import PreconditionError
from cnerf.field import FieldArchitecture, FieldParams, PositionalEncoding, attach, gradient, init_params
from cnerf.geometry import PixelCoord, Ray, project
from cnerf.render import (
    LossDiagnostics,
    LossWeights,
    RaySampleBatch,
    build_corres_batch,
    color_loss,
    composite,
    depth_loss,
    pixel_loss,
    predicted_points,
    render_ray,
    render_rays,
    sample_deltas,
    sample_stratified,
    sample_stratified_batch,
    scalar,
    total_loss,
)

POINTS = np.array([[0.1, 0.05, 0.5], [-0.2, 0.1, 0.8]])


@pytest.fixture
def cameras(two_cameras):
    a, b = two_cameras
    return {"a": a, "b": b}


@pytest.fixture
def batch(cameras):
    corrs = []
    for X, conf in zip(POINTS, (0.9, 0.6)):
        corrs.append(Correspondence("a", "b", project(cameras["a"], X), project(cameras["b"], X), conf))
    return build_corres_batch(corrs, cameras)


# ============================================================================
# Sampling
# ============================================================================


class TestSampling:
    def test_midpoints_without_rng(self):
        t = sample_stratified_batch(2.0, 4.0, 1, 4, None)
        np.testing.assert_allclose(t[0], [2.25, 2.75, 3.25, 3.75])

    def test_one_sample_per_bin(self):
        t = sample_stratified_batch(2.0, 10.0, 50, 16, np.random.default_rng(0))
        bins = np.floor((t - 2.0) / 0.5)
        np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(16), t.shape))
        assert np.all(np.diff(t, axis=1) > 0)

    def test_single_ray(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
        t = sample_stratified(ray, 8, np.random.default_rng(1))
        assert t.shape == (8,)
        assert 1.0 <= t[0] and t[-1] < 3.0

    def test_deltas_close_at_far_bound(self):
        t = np.array([[2.25, 2.75, 3.25, 3.75]])
        np.testing.assert_allclose(sample_deltas(t, 4.0), [[0.5, 0.5, 0.5, 0.25]])

    @pytest.mark.parametrize("near,far,M", [(2.0, 4.0, 1), (4.0, 2.0, 8), (-1.0, 2.0, 8), (0.0, math.inf, 8)])
    def test_bad_sampling_arguments(self, near, far, M):
        with pytest.raises(PreconditionError):
            sample_stratified_batch(near, far, 1, M, None)


# ============================================================================
# Compositing
# ============================================================================


class TestComposite:
    def test_constant_density_weight_sum(self):
        t = sample_stratified_batch(2.0, 6.0, 1, 8, None)
        deltas = sample_deltas(t, 6.0)
        sigma = np.full((1, 8), 0.4)
        comp = composite(sigma, np.full((1, 8, 3), 0.5), t, deltas)
        expected = 1.0 - math.exp(-0.4 * float(np.sum(deltas)))
        assert float(np.sum(comp.weights)) == pytest.approx(expected, rel=1e-12)
        np.testing.assert_allclose(comp.color[0], 0.5 * expected)

    def test_opaque_slab_sets_depth_and_color(self):
        t = sample_stratified_batch(2.0, 6.0, 1, 8, None)
        sigma = np.zeros((1, 8))
        sigma[0, 5] = 1e4
        colors = np.zeros((1, 8, 3))
        colors[0, 5] = [0.2, 0.7, 0.1]
        colors[0, 6:] = 1.0
        comp = composite(sigma, colors, t, sample_deltas(t, 6.0))
        assert float(comp.depth[0]) == pytest.approx(t[0, 5], rel=1e-9)
        np.testing.assert_allclose(comp.color[0], [0.2, 0.7, 0.1], atol=1e-9)
        assert comp.weights[0, 6:].max() < 1e-12

    def test_empty_space_composites_on_black(self):
        t = sample_stratified_batch(2.0, 6.0, 3, 8, None)
        comp = composite(np.zeros((3, 8)), np.ones((3, 8, 3)), t, sample_deltas(t, 6.0))
        np.testing.assert_array_equal(comp.color, np.zeros((3, 3)))
        np.testing.assert_array_equal(comp.depth, np.zeros(3))
        np.testing.assert_array_equal(comp.transmittance, np.ones((3, 8)))

    def test_transmittance_stays_positive_behind_opaque_slab(self):
        t = sample_stratified_batch(2.0, 6.0, 1, 8, None)
        deltas = sample_deltas(t, 6.0)
        sigma = np.zeros((1, 8))
        sigma[0, 2] = 1e6
        colors = np.full((1, 8, 3), 0.5)
        comp = composite(sigma, colors, t, deltas)
        assert np.all(comp.transmittance > 0)
        samples = RaySampleBatch(t, deltas, sigma, colors, comp.transmittance, comp.weights)
        samples.check()

    def test_check_rejects_zero_transmittance(self):
        t = np.array([[2.5, 3.5, 4.5]])
        samples = RaySampleBatch(
            t=t,
            deltas=sample_deltas(t, 5.0),
            sigma=np.zeros((1, 3)),
            colors=np.zeros((1, 3, 3)),
            transmittance=np.array([[1.0, 0.5, 0.0]]),
            weights=np.array([[0.5, 0.5, 0.0]]),
        )
        with pytest.raises(PreconditionError):
            samples.check()


# sigma(t) = 0.3 + 0.2 sin t, c(t) = 0.5 + 0.4 cos t on [2, 6]; optical depth in closed form.
NEAR, FAR = 2.0, 6.0


def _analytic_sigma(t):
    return 0.3 + 0.2 * np.sin(t)


def _analytic_color(t):
    return 0.5 + 0.4 * np.cos(t)


def _analytic_transmittance(t):
    return np.exp(-(0.3 * (t - NEAR) + 0.2 * (np.cos(NEAR) - np.cos(t))))


class TestQuadratureConvergence:
    @pytest.fixture(scope="class")
    def reference(self):
        s = np.linspace(NEAR, FAR, 200001)
        density = _analytic_transmittance(s) * _analytic_sigma(s)
        return trapezoid(density * _analytic_color(s), s), trapezoid(s * density, s)

    def _errors(self, M, reference):
        t = sample_stratified_batch(NEAR, FAR, 1, M, None)
        colors = np.repeat(_analytic_color(t)[:, :, None], 3, axis=2)
        comp = composite(_analytic_sigma(t), colors, t, sample_deltas(t, FAR))
        return abs(float(comp.color[0, 0]) - reference[0]), abs(float(comp.depth[0]) - reference[1])

    def test_closed_form_transmittance_matches_fine_sum(self):
        t = sample_stratified_batch(NEAR, FAR, 1, 4096, None)
        comp = composite(_analytic_sigma(t), np.zeros((1, 4096, 3)), t, sample_deltas(t, FAR))
        np.testing.assert_allclose(comp.transmittance[0], _analytic_transmittance(t[0] - 0.5 * (FAR - NEAR) / 4096),
                                   rtol=1e-6)

    def test_error_halves_as_samples_double(self, reference):
        errors = [self._errors(M, reference) for M in (32, 64, 128, 256)]
        for coarse, fine in zip(errors, errors[1:]):
            assert coarse[0] / fine[0] > 1.7, errors
            assert coarse[1] / fine[1] > 1.7, errors
        assert errors[-1][0] < 1e-3
        assert errors[-1][1] < 1e-2


class TestRenderRays:
    @pytest.fixture
    def params(self):
        arch = FieldArchitecture(PositionalEncoding(2, 1), hidden_layers=1, hidden_width=8, color_width=4)
        return init_params(arch, seed=0)

    def test_samples_satisfy_invariants(self, params):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(6, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t = sample_stratified_batch(2.0, 10.0, 6, 16, rng)
        out = render_rays(params, np.zeros((6, 3)), d, t, 10.0)
        out.samples.check()
        assert np.all((out.color >= 0) & (out.color <= 1))
        assert np.all((out.depth >= 0) & (out.depth <= 10.0))

    def test_render_ray_matches_batch(self, params):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 2.0, 10.0)
        samples = sample_stratified(ray, 16, None)
        color, depth, weights = render_ray(params, ray, samples)
        out = render_rays(params, ray.origin[None], ray.direction[None], samples[None], 10.0)
        np.testing.assert_allclose(color, out.color[0])
        assert depth == pytest.approx(float(out.depth[0]))
        assert weights.sum() <= 1.0 + 1e-12

    def test_render_ray_needs_finite_far(self, params):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 2.0, math.inf)
        with pytest.raises(PreconditionError):
            render_ray(params, ray, np.linspace(2.5, 9.5, 8))

    def test_predicted_points(self):
        o = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        d = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        y = predicted_points(o, d, np.array([2.0, 3.0]))
        np.testing.assert_allclose(y, [[0, 0, 2], [4, 1, 1]])


# ============================================================================
# Losses
# ============================================================================


class TestColorLoss:
    def test_mean_squared_color_error(self):
        rendered = np.array([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]])
        gt = np.array([[0.5, 0.5, 0.0], [0.0, 0.1, 0.0]])
        assert float(color_loss(rendered, gt)) == pytest.approx((0.25 + 0.01) / 2)


class TestCorrespondenceLosses:
    def test_batch_targets_match_scene_points(self, batch):
        assert len(batch) == 2
        np.testing.assert_allclose(batch.x_q, POINTS, atol=1e-6)
        np.testing.assert_allclose(batch.x_s, POINTS, atol=1e-6)

    def test_exact_predictions_cost_nothing(self, batch):
        assert scalar(pixel_loss(batch.x_q, batch.x_s, batch)) == pytest.approx(0.0, abs=1e-6)
        assert scalar(depth_loss(batch.x_q, batch.x_s, batch)) == pytest.approx(0.0, abs=1e-9)

    def test_pixel_loss_is_confidence_weighted(self, batch):
        # Shift each query prediction so its support reprojection moves by a known amount.
        y_q = batch.x_q.copy()
        y_q[:, 0] += 0.1
        per_row = []
        cam = (batch.K_s[0], batch.R_s[0], batch.t_s[0])
        for i in range(2):
            Xc = cam[1] @ y_q[i] + cam[2]
            u = cam[0][0, 0] * Xc[0] / Xc[2] + cam[0][0, 2]
            v = cam[0][1, 1] * Xc[1] / Xc[2] + cam[0][1, 2]
            per_row.append(math.hypot(u - batch.uv_s[i, 0], v - batch.uv_s[i, 1]))
        expected = (0.9 * per_row[0] + 0.6 * per_row[1]) / 2
        assert scalar(pixel_loss(y_q, batch.x_s, batch)) == pytest.approx(expected, rel=1e-6, abs=1e-9)

    def test_behind_camera_costs_the_diagonal(self, batch):
        behind = np.tile([0.0, 0.0, -10.0], (2, 1))
        diag = LossDiagnostics()
        loss = scalar(pixel_loss(behind, behind, batch, diag))
        assert diag.behind_camera == 4
        assert loss == pytest.approx((0.9 + 0.6) * 2 * 80.0 / 2)

    def test_depth_loss_ratio(self, batch):
        y_q = batch.o_q + 2.0 * (batch.x_q - batch.o_q)
        assert scalar(depth_loss(y_q, batch.x_s, batch)) == pytest.approx((0.9 + 0.6) / 2)

    def test_depth_loss_skips_targets_at_the_camera(self, batch):
        batch.x_q[0] = batch.o_q[0]
        diag = LossDiagnostics()
        y_q = batch.o_q + 2.0 * (batch.x_q - batch.o_q)
        y_q[0] = batch.x_s[0]
        loss = scalar(depth_loss(y_q, batch.x_s, batch, diag))
        assert diag.depth_skipped == 1
        assert loss == pytest.approx(0.6)

    def test_empty_batch(self, cameras):
        empty = build_corres_batch([], cameras)
        assert pixel_loss(np.zeros((0, 3)), np.zeros((0, 3)), empty) == 0.0
        assert depth_loss(np.zeros((0, 3)), np.zeros((0, 3)), empty) == 0.0

    def test_gradients_match_finite_differences(self, batch):
        rng = np.random.default_rng(5)
        y0 = np.concatenate([batch.x_q, batch.x_s]) + rng.normal(scale=0.05, size=(4, 3))

        def loss(y):
            return T.add(pixel_loss(T.index(y, slice(0, 2)), T.index(y, slice(2, 4)), batch),
                         depth_loss(T.index(y, slice(0, 2)), T.index(y, slice(2, 4)), batch))

        tape = T.DualTape()
        v = tape.variable(y0)
        (g,) = tape.gradient(loss(v), [v])
        h = 1e-6
        fd = np.zeros_like(y0)
        for i in np.ndindex(y0.shape):
            up = y0.copy()
            dn = y0.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (scalar(loss(up)) - scalar(loss(dn))) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-5)

    @pytest.mark.parametrize("factor", [1e-2, 1.0, 1e3])
    def test_depth_loss_ignores_scene_scale(self, batch, factor):
        rng = np.random.default_rng(6)
        y_q = batch.x_q + rng.normal(scale=0.2, size=batch.x_q.shape)
        y_s = batch.x_s + rng.normal(scale=0.2, size=batch.x_s.shape)
        scaled = dataclasses.replace(
            batch,
            x_q=factor * batch.x_q,
            x_s=factor * batch.x_s,
            o_q=factor * batch.o_q,
            o_s=factor * batch.o_s,
        )
        base = scalar(depth_loss(y_q, y_s, batch))
        assert base > 0
        assert scalar(depth_loss(factor * y_q, factor * y_s, scaled)) == pytest.approx(base, rel=1e-12)


# ============================================================================
# Gradients of every loss term through the renderer
# ============================================================================


SCENE_NEAR, SCENE_FAR = 2.0, 6.0
FD_STEP = 1e-5


def _random_scene(seed, cameras):
    rng = np.random.default_rng(seed)
    arch = FieldArchitecture(
        PositionalEncoding(1, 1),
        hidden_layers=int(rng.integers(1, 3)),
        hidden_width=int(rng.integers(4, 17)),
        color_width=4,
        activation="softplus",
    )
    params = init_params(arch, seed=seed)
    # Dense enough that every ray terminates well in front of both cameras.
    params.arrays["density.bias"][:] = 1.0
    n_pairs = int(rng.integers(1, 3))
    X = np.column_stack([
        rng.uniform(-0.3, 0.3, n_pairs),
        rng.uniform(-0.2, 0.2, n_pairs),
        rng.uniform(0.0, 1.0, n_pairs),
    ])
    corrs = [Correspondence("a", "b", project(cameras["a"], x), project(cameras["b"], x), float(rng.uniform(0.5, 1.0)))
             for x in X]
    batch = build_corres_batch(corrs, cameras)
    origins = np.concatenate([batch.o_q, batch.o_s])
    directions = np.concatenate([batch.d_q, batch.d_s])
    t = sample_stratified_batch(SCENE_NEAR, SCENE_FAR, len(origins), 8, rng)
    target = rng.uniform(0, 1, size=(len(origins), 3))
    return params, batch, origins, directions, t, target, rng


def _loss_terms(params, batch, origins, directions, t, target, variables=None):
    out = render_rays(params, origins, directions, t, SCENE_FAR, variables=variables)
    n = len(batch)
    y = predicted_points(origins, directions, out.depth)
    y_q = T.index(y, slice(0, n))
    y_s = T.index(y, slice(n, 2 * n))
    color = color_loss(out.color, target)
    pixel = pixel_loss(y_q, y_s, batch)
    depth = depth_loss(y_q, y_s, batch)
    total = total_loss(color, pixel, depth, LossWeights(0.1, 0.1))
    return {"color": color, "pixel": pixel, "depth": depth, "total": total}


class TestPerTermGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_each_term_matches_finite_differences(self, cameras, seed):
        params, batch, origins, directions, t, target, rng = _random_scene(seed, cameras)
        assert len(origins) <= 4

        analytic = {}
        for term in ("color", "pixel", "depth", "total"):
            tape = T.DualTape()
            variables = attach(params, tape)
            loss = _loss_terms(params, batch, origins, directions, t, target, variables)[term]
            analytic[term] = gradient(tape, loss, variables)

        flat = params.flatten()
        picks = rng.choice(flat.size, size=min(10, flat.size), replace=False)
        numeric = {term: [] for term in analytic}
        for i in picks:
            up = flat.copy()
            dn = flat.copy()
            up[i] += FD_STEP
            dn[i] -= FD_STEP
            hi = _loss_terms(FieldParams.unflatten(params.architecture, up), batch, origins, directions, t, target)
            lo = _loss_terms(FieldParams.unflatten(params.architecture, dn), batch, origins, directions, t, target)
            for term in numeric:
                numeric[term].append((scalar(hi[term]) - scalar(lo[term])) / (2 * FD_STEP))

        for term, g in analytic.items():
            fd = np.asarray(numeric[term])
            scale = np.maximum(np.maximum(np.abs(g[picks]), np.abs(fd)), 1e-3)
            worst = np.max(np.abs(g[picks] - fd) / scale)
            assert worst <= 1e-4, f"{term}: relative gradient error {worst:.3g}"


class TestTotalLoss:
    def test_zero_weights_return_color_term_untouched(self):
        color = np.float64(0.123)
        assert total_loss(color, 5.0, 7.0, LossWeights(0.0, 0.0)) is color

    def test_weighted_sum(self):
        assert float(total_loss(1.0, 2.0, 3.0, LossWeights(0.1, 0.5))) == pytest.approx(1.0 + 0.2 + 1.5)

    def test_uses_correspondences(self):
        assert LossWeights().uses_correspondences
        assert LossWeights(0.0, 0.1).uses_correspondences
        assert not LossWeights(0.0, 0.0).uses_correspondences

    def test_negative_weight_rejected(self):
        with pytest.raises(PreconditionError):
            LossWeights(-0.1, 0.0)
