"""Discrete volume rendering, expected-depth points, and the training losses.

Compositing per ray with samples t_1 < ... < t_M in [t_near, t_far]:

    delta_i = t_{i+1} - t_i           (delta_M = t_far - t_M)
    T_i     = exp(-sum_{j<i} sigma_j delta_j)   (optical depth capped at MAX_OPTICAL_DEPTH, so T_i > 0)
    w_i     = T_i (1 - exp(-sigma_i delta_i))
    color   = sum_i w_i c_i           (residual transmittance composites on black)
    depth   = sum_i w_i t_i           (unit directions: Euclidean distance)

Loss functions take tape Vars (or plain arrays) for the predicted values
and plain arrays for everything that is fixed per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from cnerf import tape as T
from cnerf.corres import Correspondence, pair_geometry
from cnerf.errors import PreconditionError
from cnerf.field import FieldParams, encode_inputs, forward
from cnerf.geometry import Camera, Ray

DEPTH_EPSILON = 1e-8

# exp(-700) is still a normal float64.
MAX_OPTICAL_DEPTH = 700.0

# Camera-frame depth at or below which a reprojection counts as behind the camera.
BEHIND_CAMERA_DEPTH = 1e-9


# ============================================================================
# Sampling
# ============================================================================


def sample_stratified_batch(
    t_near: float, t_far: float, n_rays: int, M: int, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """(n_rays, M) stratified samples; rng=None gives bin midpoints."""
    if M < 2:
        raise PreconditionError(f"need at least 2 samples per ray, got M={M}")
    if not (math.isfinite(t_near) and math.isfinite(t_far) and 0.0 <= t_near < t_far):
        raise PreconditionError(f"sampling bounds must be finite with 0 <= t_near < t_far, got [{t_near}, {t_far}]")
    width = (t_far - t_near) / M
    offsets = np.full((n_rays, M), 0.5) if rng is None else rng.random((n_rays, M))
    return t_near + (np.arange(M)[None, :] + offsets) * width


def sample_stratified(ray: Ray, M: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One uniform draw per equal-width bin of [t_near, t_far]."""
    return sample_stratified_batch(ray.t_near, ray.t_far, 1, M, rng)[0]


def sample_deltas(t: np.ndarray, t_far: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    deltas = np.empty_like(t)
    deltas[..., :-1] = t[..., 1:] - t[..., :-1]
    deltas[..., -1] = t_far - t[..., -1]
    return deltas


# ============================================================================
# Compositing
# ============================================================================


@dataclass
class RaySampleBatch:
    """Per-ray sample arrays (plain values) for inspection and invariant checks."""

    t: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    colors: np.ndarray
    transmittance: np.ndarray
    weights: np.ndarray

    def check(self) -> None:
        """Raise PreconditionError when a sampling/compositing invariant fails."""
        if np.any(np.diff(self.t, axis=-1) <= 0) or np.any(self.deltas <= 0):
            raise PreconditionError("sample positions must be strictly increasing")
        if np.any(self.transmittance[..., 0] != 1.0):
            raise PreconditionError("transmittance must start at 1")
        if np.any(np.diff(self.transmittance, axis=-1) > 0):
            raise PreconditionError("transmittance must be non-increasing")
        if np.any(self.transmittance <= 0) or np.any(self.transmittance > 1):
            raise PreconditionError("transmittance outside (0, 1]")
        if np.any(np.sum(self.weights, axis=-1) > 1.0 + 1e-9):
            raise PreconditionError("weights sum above 1")


@dataclass
class Composite:
    color: object
    depth: object
    weights: object
    transmittance: object


def composite(sigma, colors, t: np.ndarray, deltas: np.ndarray) -> Composite:
    """Alpha-composite (n, M) densities and (n, M, 3) colors along each ray."""
    tau = T.mul(sigma, deltas)
    alpha = T.sub(1.0, T.exp(T.neg(tau)))
    optical = T.cumsum_exclusive(tau, axis=1)
    optical = T.where(T.value_of(optical) < MAX_OPTICAL_DEPTH, optical, MAX_OPTICAL_DEPTH)
    trans = T.exp(T.neg(optical))
    weights = T.mul(trans, alpha)
    n, M = np.shape(t)
    w3 = T.reshape(weights, (n, M, 1))
    color = T.sum_(T.mul(w3, colors), axis=1)
    depth = T.sum_(T.mul(weights, t), axis=1)
    return Composite(color, depth, weights, trans)


@dataclass
class RenderOutput:
    color: object
    depth: object
    weights: object
    samples: RaySampleBatch


def render_rays(
    params: FieldParams,
    origins: np.ndarray,
    directions: np.ndarray,
    t: np.ndarray,
    t_far: float,
    variables: Optional[dict] = None,
) -> RenderOutput:
    """Render rays at given samples; pass `variables` (from field.attach) to record on a tape."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n, M = t.shape
    points = origins[:, None, :] + t[:, :, None] * directions[:, None, :]
    dirs = np.broadcast_to(directions[:, None, :], (n, M, 3))
    enc_x, enc_d = encode_inputs(params.architecture, points.reshape(-1, 3), dirs.reshape(-1, 3))
    arrays = params.arrays if variables is None else variables
    color, density = forward(params.architecture, arrays, enc_x, enc_d)
    sigma = T.reshape(density, (n, M))
    colors = T.reshape(color, (n, M, 3))
    deltas = sample_deltas(t, t_far)
    comp = composite(sigma, colors, t, deltas)
    samples = RaySampleBatch(
        t=t,
        deltas=deltas,
        sigma=T.value_of(sigma),
        colors=T.value_of(colors),
        transmittance=T.value_of(comp.transmittance),
        weights=T.value_of(comp.weights),
    )
    return RenderOutput(comp.color, comp.depth, comp.weights, samples)


def render_ray(params: FieldParams, ray: Ray, samples: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """(color, expected_depth, weights) for one ray at the given sample positions."""
    if not math.isfinite(ray.t_far):
        raise PreconditionError("render_ray needs a finite t_far")
    out = render_rays(params, ray.origin[None], ray.direction[None], np.asarray(samples)[None], ray.t_far)
    return out.color[0], float(out.depth[0]), out.weights[0]


def predicted_points(origins: np.ndarray, directions: np.ndarray, depth):
    """y = o + depth * d per ray."""
    n = len(np.asarray(origins))
    return T.add(origins, T.mul(T.reshape(depth, (n, 1)), directions))


# ============================================================================
# Correspondence batch
# ============================================================================


@dataclass
class CorresBatch:
    """Fixed per-pair data for the correspondence losses.

    Camera arrays are per row: K_q/R_q/t_q belong to the query image, and
    the support prediction y_s is reprojected with them (and vice versa).
    source_rows indexes the correspondence list the batch was built from.
    """

    uv_q: np.ndarray
    uv_s: np.ndarray
    x_q: np.ndarray
    x_s: np.ndarray
    o_q: np.ndarray
    o_s: np.ndarray
    d_q: np.ndarray
    d_s: np.ndarray
    confidence: np.ndarray
    K_q: np.ndarray
    R_q: np.ndarray
    t_q: np.ndarray
    K_s: np.ndarray
    R_s: np.ndarray
    t_s: np.ndarray
    diag_q: np.ndarray
    diag_s: np.ndarray
    source_rows: np.ndarray

    def __len__(self) -> int:
        return len(self.confidence)

    def take(self, rows: np.ndarray) -> CorresBatch:
        return CorresBatch(**{name: getattr(self, name)[rows] for name in self.__dataclass_fields__})


def build_corres_batch(correspondences: Sequence[Correspondence], cameras: Mapping[str, Camera]) -> CorresBatch:
    """Triangulated targets, rays and per-row camera matrices for every usable pair."""
    geo = pair_geometry(correspondences, cameras)
    keep = np.flatnonzero(geo.usable)
    rows = [correspondences[i] for i in keep]
    n = len(rows)
    uv_q = np.array([[c.p_q.u, c.p_q.v] for c in rows], dtype=np.float64).reshape(n, 2)
    uv_s = np.array([[c.p_s.u, c.p_s.v] for c in rows], dtype=np.float64).reshape(n, 2)
    cams_q = [cameras[c.image_q] for c in rows]
    cams_s = [cameras[c.image_s] for c in rows]
    d_q = np.zeros((n, 3))
    d_s = np.zeros((n, 3))
    for i, (cq, cs) in enumerate(zip(cams_q, cams_s)):
        d_q[i] = cq.pixel_directions(uv_q[i:i + 1])[0]
        d_s[i] = cs.pixel_directions(uv_s[i:i + 1])[0]

    def stack(cams, attr, shape):
        return np.array([getattr(c, attr) for c in cams], dtype=np.float64).reshape((n,) + shape)

    return CorresBatch(
        uv_q=uv_q, uv_s=uv_s,
        x_q=geo.x_q[keep].reshape(n, 3), x_s=geo.x_s[keep].reshape(n, 3),
        o_q=stack(cams_q, "center", (3,)), o_s=stack(cams_s, "center", (3,)),
        d_q=d_q, d_s=d_s,
        confidence=np.array([c.confidence for c in rows], dtype=np.float64),
        K_q=stack(cams_q, "intrinsics", (3, 3)), R_q=stack(cams_q, "rotation", (3, 3)),
        t_q=stack(cams_q, "translation", (3,)),
        K_s=stack(cams_s, "intrinsics", (3, 3)), R_s=stack(cams_s, "rotation", (3, 3)),
        t_s=stack(cams_s, "translation", (3,)),
        diag_q=np.array([c.diagonal for c in cams_q], dtype=np.float64),
        diag_s=np.array([c.diagonal for c in cams_s], dtype=np.float64),
        source_rows=keep.astype(np.int64),
    )


# ============================================================================
# Losses
# ============================================================================


@dataclass(frozen=True)
class LossWeights:
    lambda_pixel: float = 0.1
    lambda_depth: float = 0.1

    def __post_init__(self):
        for name in ("lambda_pixel", "lambda_depth"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise PreconditionError(f"{name} must be finite and >= 0, got {value!r}")

    @property
    def uses_correspondences(self) -> bool:
        return self.lambda_pixel > 0 or self.lambda_depth > 0


@dataclass
class LossDiagnostics:
    """Tallies of pairs that took an error-policy branch."""

    behind_camera: int = 0
    depth_skipped: int = 0


def color_loss(rendered, ground_truth: np.ndarray):
    """Mean over rays of the squared color error."""
    diff = T.sub(rendered, np.asarray(ground_truth, dtype=np.float64))
    return T.mean(T.sum_(T.mul(diff, diff), axis=1))


def _reprojection_error(points, K: np.ndarray, R: np.ndarray, t: np.ndarray, uv: np.ndarray,
                        penalty: np.ndarray, diagnostics: Optional[LossDiagnostics]):
    cam = T.add(T.batched_matvec(R, points), t)
    z = T.index(cam, (slice(None), 2))
    behind = T.value_of(z) <= BEHIND_CAMERA_DEPTH
    if diagnostics is not None:
        diagnostics.behind_camera += int(np.count_nonzero(behind))
    z_safe = T.where(behind, 1.0, z)
    xn = T.div(T.index(cam, (slice(None), 0)), z_safe)
    yn = T.div(T.index(cam, (slice(None), 1)), z_safe)
    u = T.add(T.add(T.mul(K[:, 0, 0], xn), T.mul(K[:, 0, 1], yn)), K[:, 0, 2])
    v = T.add(T.mul(K[:, 1, 1], yn), K[:, 1, 2])
    du = T.sub(u, uv[:, 0])
    dv = T.sub(v, uv[:, 1])
    err = T.sqrt(T.add(T.mul(du, du), T.mul(dv, dv)))
    return T.where(behind, penalty, err)


def pixel_loss(y_q, y_s, batch: CorresBatch, diagnostics: Optional[LossDiagnostics] = None):
    """Mean over pairs of alpha * (|pi_q(y_s) - p_q| + |pi_s(y_q) - p_s|), in pixels.

    A prediction at or behind the opposite camera contributes that camera's
    image diagonal instead of a projection.
    """
    if len(batch) == 0:
        return 0.0
    err_q = _reprojection_error(y_s, batch.K_q, batch.R_q, batch.t_q, batch.uv_q, batch.diag_q, diagnostics)
    err_s = _reprojection_error(y_q, batch.K_s, batch.R_s, batch.t_s, batch.uv_s, batch.diag_s, diagnostics)
    return T.mean(T.mul(batch.confidence, T.add(err_q, err_s)))


def depth_loss(y_q, y_s, batch: CorresBatch, diagnostics: Optional[LossDiagnostics] = None,
               epsilon: float = DEPTH_EPSILON):
    """Mean over pairs of alpha * (| |y_q-o_q|/|x_q-o_q| - 1 | + | |y_s-o_s|/|x_s-o_s| - 1 |).

    Pairs whose target sits within epsilon of a camera center are skipped
    and tallied; the mean runs over the remaining pairs.
    """
    if len(batch) == 0:
        return 0.0
    ref_q = np.sqrt(np.sum((batch.x_q - batch.o_q) ** 2, axis=1))
    ref_s = np.sqrt(np.sum((batch.x_s - batch.o_s) ** 2, axis=1))
    keep = np.flatnonzero((ref_q > epsilon) & (ref_s > epsilon))
    if diagnostics is not None:
        diagnostics.depth_skipped += len(batch) - len(keep)
    if len(keep) == 0:
        return 0.0
    if len(keep) < len(batch):
        y_q = T.index(y_q, keep)
        y_s = T.index(y_s, keep)
    ratio_q = T.div(T.norm(T.sub(y_q, batch.o_q[keep]), axis=1), ref_q[keep])
    ratio_s = T.div(T.norm(T.sub(y_s, batch.o_s[keep]), axis=1), ref_s[keep])
    terms = T.add(T.abs_(T.sub(ratio_q, 1.0)), T.abs_(T.sub(ratio_s, 1.0)))
    return T.mean(T.mul(batch.confidence[keep], terms))


def total_loss(color, pixel, depth, weights: LossWeights):
    """color + lambda_pixel * pixel + lambda_depth * depth."""
    total = color
    if weights.lambda_pixel:
        total = T.add(total, T.mul(weights.lambda_pixel, pixel))
    if weights.lambda_depth:
        total = T.add(total, T.mul(weights.lambda_depth, depth))
    return total


@dataclass
class LossTerms:
    color: float
    pixel: float
    depth: float
    total: float
    diagnostics: LossDiagnostics = field(default_factory=LossDiagnostics)

    def as_dict(self) -> dict[str, float]:
        return {"L_color": self.color, "L_pixel": self.pixel, "L_depth": self.depth, "total": self.total}


def scalar(x) -> float:
    return float(np.asarray(T.value_of(x)).reshape(-1)[0])
