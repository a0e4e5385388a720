"""Image and geometry quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from cnerf.errors import DomainError, PreconditionError
from cnerf.geometry import Camera

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
SSIM_CROP = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; +inf for identical images."""
    a, b = _same_shape(image_a, image_b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    blur = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Mean structural similarity, 11x11 Gaussian window, averaged over channels.

    The border where the window leaves the image is cropped when the image
    is large enough to keep an interior.
    """
    a, b = _same_shape(image_a, image_b, "ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    maps = np.stack([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[-1])], axis=-1)
    h, w = maps.shape[:2]
    if h > 2 * SSIM_CROP and w > 2 * SSIM_CROP:
        maps = maps[SSIM_CROP:h - SSIM_CROP, SSIM_CROP:w - SSIM_CROP]
    return float(np.clip(maps.mean(), -1.0, 1.0))


def depth_mae(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, far: float) -> float:
    """Mean |pred - gt| over the mask, in units of the far bound."""
    pred, gt = _same_shape(pred, gt, "depth_mae")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise PreconditionError(f"depth_mae: mask shape {mask.shape} does not match {pred.shape}")
    if not far > 0:
        raise DomainError(f"far bound must be > 0, got {far!r}", far)
    if not mask.any():
        return math.nan
    return float(np.mean(np.abs(pred[mask] - gt[mask]))) / far


def chamfer_l1(cloud_a: np.ndarray, cloud_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance: (mean a->b + mean b->a) / 2."""
    a = np.asarray(cloud_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(cloud_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise PreconditionError("chamfer_l1 needs two non-empty point clouds")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def depth_to_points(camera: Camera, depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Back-project ray distances at masked pixel centers to world points (n, 3)."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(depth)
    v, u = np.nonzero(mask)
    if len(u) == 0:
        return np.zeros((0, 3))
    uv = np.stack([u, v], axis=1).astype(np.float64)
    directions = camera.pixel_directions(uv)
    return camera.center[None, :] + depth[v, u][:, None] * directions


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    depth_mae: float
    chamfer_l1: float
    per_view: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)
