"""Synthetic matcher: correspondences from known geometry with controllable corruption.

Two entry points:
  synthesize_correspondences  one image pair, independent samples
  synthesize_tracks           multi-view tracks; every view that sees a surface
                              point observes it once (with its own noise), and
                              each view pair reports the match with
                              probability pair_recall

synthesize_augmented_sets re-draws the recall subset once per augmentation
transform and writes it in that transform's augmented coordinates, the way
a matcher run on flipped / swapped / rescaled images would report it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from cnerf.corres import Correspondence, PixelMap
from cnerf.debug import warn_once
from cnerf.errors import DomainError
from cnerf.geometry import Camera, PixelCoord
from cnerf.synth.scene import AnalyticScene, hit_points

AUGMENTATION_TRANSFORMS: tuple[PixelMap, ...] = (
    PixelMap(),
    PixelMap(flip=True),
    PixelMap(swap=True),
    PixelMap(scale=0.5),
    PixelMap(scale=2.0),
)


@dataclass(frozen=True)
class CorruptionSpec:
    """Pixel noise, outlier rate, and the error -> confidence model."""

    pixel_noise_std: float = 0.0
    outlier_fraction: float = 0.0
    confidence_falloff_px: float = 8.0

    def __post_init__(self):
        if not (math.isfinite(self.pixel_noise_std) and self.pixel_noise_std >= 0):
            raise DomainError(f"pixel_noise_std must be >= 0, got {self.pixel_noise_std!r}", self.pixel_noise_std)
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise DomainError(f"outlier_fraction must lie in [0, 1), got {self.outlier_fraction!r}",
                              self.outlier_fraction)
        if not self.confidence_falloff_px > 0:
            raise DomainError("confidence_falloff_px must be > 0", self.confidence_falloff_px)

    def confidence(self, error_px: np.ndarray) -> np.ndarray:
        """clamp(1 - error / falloff, 0.5, 1)."""
        return np.clip(1.0 - np.asarray(error_px, dtype=np.float64) / self.confidence_falloff_px, 0.5, 1.0)


@dataclass
class SynthesisResult:
    correspondences: list[Correspondence]
    covisible: bool = True
    outliers: int = 0


def _sample_pixels(camera: Camera, n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-0.5, camera.width - 0.5, size=n)
    v = rng.uniform(-0.5, camera.height - 0.5, size=n)
    return np.stack([u, v], axis=1)


def synthesize_correspondences(
    scene: AnalyticScene,
    cam_q: Camera,
    cam_s: Camera,
    density: int,
    corruption: CorruptionSpec,
    rng: np.random.Generator,
) -> SynthesisResult:
    """Sample `density` query pixels and match the co-visible ones into the support view.

    Both pixels get Gaussian noise; outliers replace the support pixel with a
    uniform random one. Confidence follows the corruption's error model.
    """
    uv_q = _sample_pixels(cam_q, density, rng)
    X, hit = hit_points(scene, cam_q, uv_q)
    seen = hit & scene.visible_from(cam_s, X)
    rows = np.flatnonzero(seen)
    if len(rows) == 0:
        warn_once(f"no-covisible-{cam_q.name}-{cam_s.name}",
                  f"views {cam_q.name!r} and {cam_s.name!r} share no visible surface")
        return SynthesisResult([], covisible=False)

    true_q = uv_q[rows]
    true_s, _ = cam_s.project_points(X[rows])
    noise_q = rng.normal(0.0, 1.0, size=true_q.shape) * corruption.pixel_noise_std
    noise_s = rng.normal(0.0, 1.0, size=true_s.shape) * corruption.pixel_noise_std
    obs_q = true_q + noise_q
    obs_s = true_s + noise_s
    is_outlier = rng.random(len(rows)) < corruption.outlier_fraction
    obs_s = np.where(is_outlier[:, None], _sample_pixels(cam_s, len(rows), rng), obs_s)

    err = 0.5 * (np.hypot(*(obs_q - true_q).T) + np.hypot(*(obs_s - true_s).T))
    conf = corruption.confidence(err)
    keep = cam_q.contains(obs_q[:, 0], obs_q[:, 1]) & cam_s.contains(obs_s[:, 0], obs_s[:, 1])
    out = [
        Correspondence(cam_q.name, cam_s.name, PixelCoord(*obs_q[i]), PixelCoord(*obs_s[i]), float(conf[i]))
        for i in np.flatnonzero(keep)
    ]
    return SynthesisResult(out, covisible=True, outliers=int(np.count_nonzero(is_outlier & keep)))


# ============================================================================
# Tracks
# ============================================================================


@dataclass
class Track:
    """One surface point and its noisy observation in every view that sees it."""

    point: np.ndarray
    observations: dict[str, np.ndarray]
    errors: dict[str, float]


@dataclass
class TrackSet:
    tracks: list[Track] = field(default_factory=list)
    correspondences: list[Correspondence] = field(default_factory=list)
    outliers: int = 0


def _observe(
    scene: AnalyticScene,
    cameras: Sequence[Camera],
    points_per_view: int,
    corruption: CorruptionSpec,
    rng: np.random.Generator,
) -> list[Track]:
    tracks: list[Track] = []
    for seed_view in cameras:
        uv = _sample_pixels(seed_view, points_per_view, rng)
        X, hit = hit_points(scene, seed_view, uv)
        X = X[hit]
        if len(X) == 0:
            continue
        noise = rng.normal(0.0, 1.0, size=(len(X), len(cameras), 2)) * corruption.pixel_noise_std
        seen = np.stack([scene.visible_from(cam, X) for cam in cameras], axis=1)
        projected = [cam.project_points(X)[0] for cam in cameras]
        for i in range(len(X)):
            obs, errs = {}, {}
            for j, cam in enumerate(cameras):
                if not seen[i, j]:
                    continue
                p = projected[j][i] + noise[i, j]
                if bool(cam.contains(p[0], p[1])):
                    obs[cam.name] = p
                    errs[cam.name] = float(np.hypot(noise[i, j, 0], noise[i, j, 1]))
            if len(obs) >= 2:
                tracks.append(Track(X[i], obs, errs))
    return tracks


def _draw_pairs(
    tracks: Sequence[Track],
    cameras: Mapping[str, Camera],
    order: Sequence[str],
    pair_recall: float,
    corruption: CorruptionSpec,
    rng: np.random.Generator,
) -> tuple[list[Correspondence], int]:
    """One recall + outlier draw for every (track, view pair)."""
    out: list[Correspondence] = []
    outliers = 0
    for track in tracks:
        names = [n for n in order if n in track.observations]
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                q, s = names[a], names[b]
                if rng.random() >= pair_recall:
                    continue
                p_q = track.observations[q]
                p_s = track.observations[s]
                err = 0.5 * (track.errors[q] + track.errors[s])
                if rng.random() < corruption.outlier_fraction:
                    true_s = cameras[s].project_points(track.point[None])[0][0]
                    p_s = _sample_pixels(cameras[s], 1, rng)[0]
                    err = 0.5 * (track.errors[q] + float(np.hypot(*(p_s - true_s))))
                    outliers += 1
                conf = float(corruption.confidence(err))
                out.append(Correspondence(q, s, PixelCoord(*p_q), PixelCoord(*p_s), conf))
    return out, outliers


def synthesize_tracks(
    scene: AnalyticScene,
    cameras: Sequence[Camera],
    points_per_view: int,
    corruption: CorruptionSpec,
    pair_recall: float,
    rng: np.random.Generator,
) -> TrackSet:
    """Multi-view tracks and the correspondences a matcher with the given recall would report."""
    if not 0.0 < pair_recall <= 1.0:
        raise DomainError(f"pair_recall must lie in (0, 1], got {pair_recall!r}", pair_recall)
    tracks = _observe(scene, cameras, points_per_view, corruption, rng)
    by_name = {cam.name: cam for cam in cameras}
    corrs, outliers = _draw_pairs(tracks, by_name, [c.name for c in cameras], pair_recall, corruption, rng)
    if not corrs:
        warn_once(f"no-tracks-{scene.name}", f"scene {scene.name!r}: no co-visible surface between views")
    return TrackSet(tracks, corrs, outliers)


def to_augmented(c: Correspondence, pixel_map: PixelMap, cameras: Mapping[str, Camera]) -> Correspondence:
    """Express an original-coordinate correspondence in a transform's augmented coordinates."""
    u_q, v_q = pixel_map.forward(c.p_q.u, c.p_q.v, cameras[c.image_q].width)
    u_s, v_s = pixel_map.forward(c.p_s.u, c.p_s.v, cameras[c.image_s].width)
    mapped = Correspondence(c.image_q, c.image_s, PixelCoord(u_q, v_q), PixelCoord(u_s, v_s), c.confidence)
    return mapped.swapped() if pixel_map.swap else mapped


def synthesize_augmented_sets(
    track_set: TrackSet,
    cameras: Sequence[Camera],
    transforms: Sequence[PixelMap],
    pair_recall: float,
    corruption: CorruptionSpec,
    rng: np.random.Generator,
    identity_set: Optional[list[Correspondence]] = None,
) -> list[list[Correspondence]]:
    """One raw set per transform, in augmented coordinates.

    An identity transform reuses `identity_set` when given (the set the
    track synthesis already drew).
    """
    by_name = {cam.name: cam for cam in cameras}
    order = [cam.name for cam in cameras]
    sets = []
    for pixel_map in transforms:
        if pixel_map.is_identity and identity_set is not None:
            sets.append(list(identity_set))
            continue
        drawn, _ = _draw_pairs(track_set.tracks, by_name, order, pair_recall, corruption, rng)
        sets.append([to_augmented(c, pixel_map, by_name) for c in drawn])
    return sets
