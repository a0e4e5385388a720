"""Training loop, full-view rendering and held-out evaluation.

One iteration:
  1. draw a batch of training pixels (without replacement)
  2. when either loss weight is non-zero, draw up to max_pairs correspondence
     pairs with an endpoint on a batch pixel
  3. render batch rays plus both rays of every drawn pair on one tape
  4. total = L_color + lambda_pixel * L_pixel + lambda_depth * L_depth
  5. backpropagate and take one Adam step

With both weights at zero step 2 never touches the generator, so the
trajectory is the one a build without correspondences would follow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from cnerf import tape as T
from cnerf.corres import Correspondence
from cnerf.debug import debug_log
from cnerf.errors import PreconditionError, TrainingError
from cnerf.field import (
    AdamState,
    FieldArchitecture,
    FieldParams,
    attach,
    gradient,
    init_params,
    learning_rate,
    optimizer_step,
)
from cnerf.geometry import Camera, pixels_to_rays
from cnerf.models import EvalConfig, FieldConfig, TrainConfig
from cnerf.render import (
    CorresBatch,
    LossDiagnostics,
    LossTerms,
    LossWeights,
    build_corres_batch,
    color_loss,
    depth_loss,
    pixel_loss,
    predicted_points,
    render_rays,
    sample_stratified_batch,
    scalar,
    total_loss,
)
from cnerf.synth.metrics import EvalReport, chamfer_l1, depth_mae, depth_to_points, psnr, ssim
from cnerf.workers import chunk_bounds, ordered_map

TRACE_COLUMNS = ("iteration", "L_color", "L_pixel", "L_depth", "total", "psnr", "depth_mae")

# Rays per rendering chunk; fixed so output never depends on the thread count.
RENDER_CHUNK_RAYS = 1024


# ============================================================================
# Inputs
# ============================================================================


@dataclass
class View:
    """A posed image, with ground-truth depth when known."""

    name: str
    camera: Camera
    image: np.ndarray
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise PreconditionError(f"view {self.name!r}: image shape {self.image.shape} != {(h, w, 3)}")
        if self.depth is not None and self.depth.shape != (h, w):
            raise PreconditionError(f"view {self.name!r}: depth shape {self.depth.shape} != {(h, w)}")


@dataclass
class PixelPool:
    """Every training pixel as a ray with its color."""

    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray
    offsets: dict[str, int]

    def __len__(self) -> int:
        return len(self.colors)

    @classmethod
    def from_views(cls, views: Sequence[View]) -> PixelPool:
        origins, directions, colors, offsets = [], [], [], {}
        offset = 0
        for view in views:
            cam = view.camera
            vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
            uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
            o, d = pixels_to_rays(cam, uv)
            origins.append(o)
            directions.append(d)
            colors.append(view.image.reshape(-1, 3).astype(np.float64))
            offsets[view.name] = offset
            offset += len(uv)
        return cls(np.concatenate(origins), np.concatenate(directions), np.concatenate(colors), offsets)

    def pixel_ids(self, views: Mapping[str, View], image: Sequence[str], uv: np.ndarray) -> np.ndarray:
        """Global pixel id of the pixel each (image, u, v) rounds to; -1 outside the pool."""
        ids = np.full(len(image), -1, dtype=np.int64)
        for i, name in enumerate(image):
            if name not in self.offsets:
                continue
            cam = views[name].camera
            u, v = int(round(uv[i, 0])), int(round(uv[i, 1]))
            if 0 <= u < cam.width and 0 <= v < cam.height:
                ids[i] = self.offsets[name] + v * cam.width + u
        return ids


class PairIndex:
    """Correspondence pairs between training views, keyed by the pixels their endpoints round to."""

    def __init__(self, pool: PixelPool, views: Sequence[View], correspondences: Sequence[Correspondence]):
        by_name = {v.name: v for v in views}
        usable = [c for c in correspondences if c.image_q in by_name and c.image_s in by_name]
        cameras = {name: v.camera for name, v in by_name.items()}
        self.batch: CorresBatch = build_corres_batch(usable, cameras)
        kept = [usable[i] for i in self.batch.source_rows]
        self.pixel_q = pool.pixel_ids(by_name, [c.image_q for c in kept], self.batch.uv_q)
        self.pixel_s = pool.pixel_ids(by_name, [c.image_s for c in kept], self.batch.uv_s)

    def __len__(self) -> int:
        return len(self.batch)

    def eligible(self, batch_ids: np.ndarray) -> np.ndarray:
        """Rows with either endpoint on a batch pixel, ascending."""
        return np.flatnonzero(np.isin(self.pixel_q, batch_ids) | np.isin(self.pixel_s, batch_ids))


# ============================================================================
# Results
# ============================================================================


@dataclass
class TrainResult:
    params: FieldParams
    state: AdamState
    iterations: int
    trace: list[dict[str, float]] = field(default_factory=list)
    diagnostics: LossDiagnostics = field(default_factory=LossDiagnostics)
    pair_count: int = 0


# ============================================================================
# Rendering
# ============================================================================


def render_image(
    params: FieldParams,
    camera: Camera,
    near: float,
    far: float,
    M: int = 64,
    stride: int = 1,
    threads: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Color (h, w, 3) and expected depth (h, w) at bin-midpoint samples.

    `stride` > 1 renders every stride-th pixel in both directions.
    """
    params.check_finite()
    us = np.arange(0, camera.width, stride)
    vs = np.arange(0, camera.height, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    origins, directions = pixels_to_rays(camera, uv)

    def work(bounds):
        start, stop = bounds
        t = sample_stratified_batch(near, far, stop - start, M, None)
        out = render_rays(params, origins[start:stop], directions[start:stop], t, far)
        return out.color, out.depth

    parts = ordered_map(work, chunk_bounds(len(uv), RENDER_CHUNK_RAYS), threads)
    color = np.concatenate([p[0] for p in parts]).reshape(len(vs), len(us), 3)
    depth = np.concatenate([p[1] for p in parts]).reshape(len(vs), len(us))
    return color, depth


def _trace_metrics(params: FieldParams, views: Sequence[View], near: float, far: float,
                   M: int, stride: int) -> tuple[float, float]:
    if not views:
        return math.nan, math.nan
    psnrs, maes = [], []
    for view in views:
        color, depth = render_image(params, view.camera, near, far, M, stride)
        psnrs.append(psnr(color, view.image[::stride, ::stride]))
        if view.depth is not None:
            gt = view.depth[::stride, ::stride]
            maes.append(depth_mae(depth, gt, np.isfinite(gt), far))
    return float(np.mean(psnrs)), float(np.mean(maes)) if maes else math.nan


# ============================================================================
# Training
# ============================================================================


def train(
    train_views: Sequence[View],
    correspondences: Sequence[Correspondence],
    config: TrainConfig,
    field_config: FieldConfig,
    near: float,
    far: float,
    seed: int = 0,
    trace_views: Sequence[View] = (),
    on_trace: Optional[Callable[[dict[str, float]], None]] = None,
) -> TrainResult:
    """Fit a radiance field to the training views (plus the correspondence prior)."""
    if not train_views:
        raise PreconditionError("training needs at least one view")
    weights = LossWeights(config.lambda_pixel, config.lambda_depth)
    init_seq, batch_seq = np.random.SeedSequence(seed).spawn(2)
    architecture = FieldArchitecture.from_config(field_config)
    params = init_params(architecture, int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(batch_seq)

    pool = PixelPool.from_views(train_views)
    pairs = None
    if weights.uses_correspondences and correspondences and config.max_pairs > 0:
        pairs = PairIndex(pool, train_views, correspondences)
        debug_log(f"train: {len(pairs)} usable correspondence pairs of {len(correspondences)}")

    flat = params.flatten()
    state = AdamState.zeros(flat.size)
    result = TrainResult(params=params, state=state, iterations=0, pair_count=len(pairs) if pairs else 0)
    batch_size = min(config.batch_rays, len(pool))

    for it in range(config.iterations):
        ids = np.sort(rng.choice(len(pool), size=batch_size, replace=False))
        t_batch = sample_stratified_batch(near, far, batch_size, config.samples_per_ray, rng)
        origins = pool.origins[ids]
        directions = pool.directions[ids]
        t_all = t_batch

        rows = np.zeros(0, dtype=np.int64)
        if pairs is not None:
            rows = pairs.eligible(ids)
            if len(rows) > config.max_pairs:
                rows = np.sort(rng.choice(rows, size=config.max_pairs, replace=False))
            if len(rows):
                sub = pairs.batch.take(rows)
                t_pairs = sample_stratified_batch(near, far, 2 * len(rows), config.samples_per_ray, rng)
                origins = np.concatenate([origins, sub.o_q, sub.o_s])
                directions = np.concatenate([directions, sub.d_q, sub.d_s])
                t_all = np.concatenate([t_batch, t_pairs])

        tape = T.DualTape()
        variables = attach(params, tape)
        out = render_rays(params, origins, directions, t_all, far, variables)
        l_color = color_loss(T.index(out.color, slice(0, batch_size)), pool.colors[ids])
        l_pixel, l_depth = 0.0, 0.0
        if len(rows):
            P = len(rows)
            depth_q = T.index(out.depth, slice(batch_size, batch_size + P))
            depth_s = T.index(out.depth, slice(batch_size + P, batch_size + 2 * P))
            y_q = predicted_points(sub.o_q, sub.d_q, depth_q)
            y_s = predicted_points(sub.o_s, sub.d_s, depth_s)
            l_pixel = pixel_loss(y_q, y_s, sub, result.diagnostics)
            l_depth = depth_loss(y_q, y_s, sub, result.diagnostics)
        total = total_loss(l_color, l_pixel, l_depth, weights)

        terms = LossTerms(scalar(l_color), scalar(l_pixel), scalar(l_depth), scalar(total))
        if not all(math.isfinite(v) for v in terms.as_dict().values()):
            raise TrainingError(it, terms.as_dict())

        grad = gradient(tape, total, variables)
        lr = learning_rate(it, config.iterations, config.lr, config.lr_final_ratio)
        flat, state = optimizer_step(flat, grad, state, lr, it)
        params = FieldParams.unflatten(architecture, flat)

        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            psnr_value, mae_value = _trace_metrics(
                params, list(trace_views)[: config.trace_views], near, far,
                config.samples_per_ray, config.trace_stride,
            )
            row = {"iteration": it + 1, **terms.as_dict(), "psnr": psnr_value, "depth_mae": mae_value}
            result.trace.append(row)
            if on_trace is not None:
                on_trace(row)

    result.params = params
    result.state = state
    result.iterations = config.iterations
    return result


# ============================================================================
# Evaluation
# ============================================================================


def evaluate(
    params: FieldParams,
    views: Sequence[View],
    near: float,
    far: float,
    config: EvalConfig,
    threads: Optional[int] = None,
) -> tuple[EvalReport, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Render every view; PSNR / SSIM / depth MAE per view, Chamfer-L1 over all views."""
    renders: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    per_view = []
    pred_clouds, gt_clouds = [], []
    for view in views:
        color, depth = render_image(params, view.camera, near, far, config.samples_per_ray, 1, threads)
        renders[view.name] = (color, depth)
        entry = {"view": view.name, "psnr": psnr(color, view.image), "ssim": ssim(color, view.image)}
        if view.depth is not None:
            mask = np.isfinite(view.depth)
            entry["depth_mae"] = depth_mae(depth, view.depth, mask, far)
            s = config.chamfer_stride
            sub_mask = np.zeros_like(mask)
            sub_mask[::s, ::s] = mask[::s, ::s]
            pred_clouds.append(depth_to_points(view.camera, depth, sub_mask))
            gt_clouds.append(depth_to_points(view.camera, view.depth, sub_mask))
        per_view.append(entry)

    def mean_of(key: str) -> float:
        values = [e[key] for e in per_view if key in e]
        return float(np.mean(values)) if values else math.nan

    chamfer = math.nan
    if pred_clouds and sum(len(c) for c in pred_clouds):
        chamfer = chamfer_l1(np.concatenate(pred_clouds), np.concatenate(gt_clouds))
    report = EvalReport(
        psnr=mean_of("psnr"),
        ssim=mean_of("ssim"),
        depth_mae=mean_of("depth_mae"),
        chamfer_l1=chamfer,
        per_view=per_view,
    )
    return report, renders
