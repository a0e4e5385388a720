"""Correspondence prior: storage, augmentation merge, graph propagation, outlier filtering.

Pipeline order (preprocess_pipeline):
    merge_augmented -> build_graph -> propagate -> filter_projection -> filter_statistical

Filters only ever remove correspondences; survivors keep their exact
coordinates and confidences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from cnerf.debug import debug_log, warn_once
from cnerf.errors import DomainError, PreconditionError
from cnerf.geometry import (
    Camera,
    PixelCoord,
    camera_pair_key,
    projected_ray_distance_batch,
    require_positive,
)
from cnerf.knn import EXACT_LIMIT, mean_knn_distances
from cnerf.models import PreprocessConfig
from cnerf.workers import chunk_bounds, ordered_map


# Matcher confidence range for direct correspondences.
DIRECT_CONFIDENCE_MIN = 0.5

# Graph vertices are keyed by pixel rounded to this many decimals.
VERTEX_KEY_DECIMALS = 6


# ============================================================================
# Domain types
# ============================================================================


class Provenance(str, Enum):
    """Where a correspondence came from."""

    DIRECT = "direct"
    AUGMENTED = "augmented"
    PROPAGATED = "propagated"


@dataclass(frozen=True)
class Correspondence:
    """A (query pixel, support pixel, confidence) pair between two images."""

    image_q: str
    image_s: str
    p_q: PixelCoord
    p_s: PixelCoord
    confidence: float
    provenance: Provenance = Provenance.DIRECT

    def __post_init__(self):
        if self.image_q == self.image_s:
            raise DomainError(f"correspondence must join two distinct images, got {self.image_q!r} twice",
                              self.image_q)
        if not (0.0 < self.confidence <= 1.0):
            raise DomainError(f"confidence must lie in (0, 1], got {self.confidence!r}", self.confidence)
        if self.provenance is Provenance.DIRECT and self.confidence < DIRECT_CONFIDENCE_MIN:
            raise DomainError(
                f"direct matcher confidence must lie in [{DIRECT_CONFIDENCE_MIN}, 1], got {self.confidence!r}",
                self.confidence,
            )

    def swapped(self) -> Correspondence:
        """Same pair with query and support exchanged."""
        return replace(self, image_q=self.image_s, image_s=self.image_q, p_q=self.p_s, p_s=self.p_q)

    def canonical(self) -> Correspondence:
        """Orientation with image_q < image_s."""
        return self.swapped() if self.image_q > self.image_s else self


@dataclass(frozen=True)
class PixelMap:
    """Invertible pixel map between an augmented image pair and the originals.

    The augmented pair is produced by an optional horizontal flip, then a
    uniform scale (pixel-center convention u_aug = (u + 0.5) * scale - 0.5),
    with query and support optionally swapped.
    """

    flip: bool = False
    scale: float = 1.0
    swap: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DomainError(f"pixel map scale must be finite and > 0, got {self.scale!r}", self.scale)

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.scale == 1.0 and not self.swap

    def forward(self, u: float, v: float, width: int) -> tuple[float, float]:
        """Original -> augmented coordinates."""
        if self.flip:
            u = (width - 1) - u
        return (u + 0.5) * self.scale - 0.5, (v + 0.5) * self.scale - 0.5

    def to_original(self, u: float, v: float, width: int) -> tuple[float, float]:
        """Augmented -> original coordinates."""
        u = (u + 0.5) / self.scale - 0.5
        v = (v + 0.5) / self.scale - 0.5
        if self.flip:
            u = (width - 1) - u
        return u, v

    def to_dict(self) -> dict[str, Any]:
        return {"flip": self.flip, "scale": self.scale, "swap": self.swap}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PixelMap:
        return cls(flip=bool(data.get("flip", False)), scale=float(data.get("scale", 1.0)),
                   swap=bool(data.get("swap", False)))


IDENTITY_MAP = PixelMap()


@dataclass
class FilterReport:
    """Counts through the filter stages; survival = final / input (1 for empty input)."""

    input_count: int
    after_projection_filter: int
    after_knn_filter: int
    thresholds: dict[str, Any] = field(default_factory=dict)
    degenerate_count: int = 0
    survival_fraction: float = field(init=False)

    def __post_init__(self):
        if not (self.input_count >= self.after_projection_filter >= self.after_knn_filter >= 0):
            raise PreconditionError(
                f"filter counts must be non-increasing: {self.input_count}, "
                f"{self.after_projection_filter}, {self.after_knn_filter}"
            )
        self.survival_fraction = 1.0 if self.input_count == 0 else self.after_knn_filter / self.input_count

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class PipelineReport(FilterReport):
    """FilterReport plus the counts of the augmentation and propagation stages."""

    raw_count: int = 0
    merged_count: int = 0
    dropped_out_of_bounds: int = 0
    duplicates_collapsed: int = 0
    propagated_count: int = 0
    coverage: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class MergeResult:
    correspondences: list[Correspondence]
    dropped_out_of_bounds: int = 0
    duplicates_collapsed: int = 0


@dataclass
class PointCloud:
    """Triangulated midpoints with per-point confidence."""

    points: np.ndarray
    confidence: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.points)


# ============================================================================
# Array helpers
# ============================================================================


def _pixel_arrays(correspondences: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    uv_q = np.array([[c.p_q.u, c.p_q.v] for c in correspondences], dtype=np.float64).reshape(-1, 2)
    uv_s = np.array([[c.p_s.u, c.p_s.v] for c in correspondences], dtype=np.float64).reshape(-1, 2)
    return uv_q, uv_s


def _group_by_image_pair(correspondences: Sequence[Correspondence]) -> dict[tuple[str, str], np.ndarray]:
    groups: dict[tuple[str, str], list[int]] = {}
    for i, c in enumerate(correspondences):
        groups.setdefault((c.image_q, c.image_s), []).append(i)
    return {key: np.asarray(rows, dtype=np.int64) for key, rows in groups.items()}


@dataclass
class PairGeometry:
    """Per-correspondence triangulation and projected ray distance."""

    d_proj: np.ndarray
    x_q: np.ndarray
    x_s: np.ndarray
    t_q: np.ndarray
    t_s: np.ndarray
    degenerate: np.ndarray

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.x_q + self.x_s)

    @property
    def usable(self) -> np.ndarray:
        """Non-degenerate, forward-facing, reprojectable pairs."""
        return (~self.degenerate) & (self.t_q >= 0.0) & (self.t_s >= 0.0) & np.isfinite(self.d_proj)


def pair_geometry(correspondences: Sequence[Correspondence], cameras: Mapping[str, Camera]) -> PairGeometry:
    """Triangulate every correspondence and evaluate its projected ray distance.

    Per-row arithmetic only; rows are processed in fixed chunks so results
    do not depend on the worker count.
    """
    n = len(correspondences)
    out = PairGeometry(
        d_proj=np.full(n, np.nan),
        x_q=np.full((n, 3), np.nan),
        x_s=np.full((n, 3), np.nan),
        t_q=np.full(n, np.nan),
        t_s=np.full(n, np.nan),
        degenerate=np.zeros(n, dtype=bool),
    )
    if n == 0:
        return out
    uv_q, uv_s = _pixel_arrays(correspondences)
    tasks = []
    for (image_q, image_s), rows in _group_by_image_pair(correspondences).items():
        cam_q, cam_s = camera_pair_key(cameras, image_q, image_s)
        for start, stop in chunk_bounds(len(rows)):
            tasks.append((cam_q, cam_s, rows[start:stop]))

    def work(task):
        cam_q, cam_s, rows = task
        dist, tri = projected_ray_distance_batch(cam_q, cam_s, uv_q[rows], uv_s[rows])
        return rows, tri, dist

    for rows, tri, dist in ordered_map(work, tasks):
        out.d_proj[rows] = dist
        out.x_q[rows] = tri.x_q
        out.x_s[rows] = tri.x_s
        out.t_q[rows] = tri.t_q
        out.t_s[rows] = tri.t_s
        out.degenerate[rows] = tri.degenerate
    return out


# ============================================================================
# Augmentation merge
# ============================================================================


def merge_augmented(
    sets: Sequence[Sequence[Correspondence]],
    transforms: Sequence[PixelMap],
    image_sizes: Mapping[str, tuple[int, int]],
    dedup_radius: float = 0.5,
) -> MergeResult:
    """Express every set in original coordinates and collapse duplicates.

    Duplicates are correspondences between the same two images whose query
    and support pixels both lie within `dedup_radius`; the most confident
    one (earliest on ties) survives. Pixels mapped outside their image are
    dropped and counted.
    """
    if len(sets) != len(transforms):
        raise PreconditionError(f"got {len(sets)} correspondence sets but {len(transforms)} transforms")

    mapped: list[Correspondence] = []
    dropped = 0
    for corr_set, pixel_map in zip(sets, transforms):
        provenance = Provenance.DIRECT if pixel_map.is_identity else Provenance.AUGMENTED
        for c in corr_set:
            if pixel_map.swap:
                c = c.swapped()
            try:
                w_q, h_q = image_sizes[c.image_q]
                w_s, h_s = image_sizes[c.image_s]
            except KeyError as exc:
                raise PreconditionError(f"no image size for {exc.args[0]!r}") from None
            u_q, v_q = pixel_map.to_original(c.p_q.u, c.p_q.v, w_q)
            u_s, v_s = pixel_map.to_original(c.p_s.u, c.p_s.v, w_s)
            if not (_inside(u_q, v_q, w_q, h_q) and _inside(u_s, v_s, w_s, h_s)):
                dropped += 1
                continue
            if not pixel_map.is_identity:
                c = replace(c, p_q=PixelCoord(u_q, v_q), p_s=PixelCoord(u_s, v_s),
                            provenance=c.provenance if c.provenance is Provenance.PROPAGATED else provenance)
            mapped.append(c.canonical())

    kept = _collapse_duplicates(mapped, dedup_radius)
    if dropped:
        debug_log(f"merge_augmented: dropped {dropped} correspondences mapped outside their image")
    return MergeResult(
        correspondences=[mapped[i] for i in kept],
        dropped_out_of_bounds=dropped,
        duplicates_collapsed=len(mapped) - len(kept),
    )


def _inside(u: float, v: float, width: int, height: int) -> bool:
    return -0.5 <= u <= width - 0.5 and -0.5 <= v <= height - 0.5


def _collapse_duplicates(correspondences: Sequence[Correspondence], radius: float) -> list[int]:
    """Indices of the survivors of duplicate collapsing, in input order."""
    survivors: list[int] = []
    for rows in _group_by_image_pair(correspondences).values():
        if len(rows) == 1:
            survivors.append(int(rows[0]))
            continue
        uv_q, uv_s = _pixel_arrays([correspondences[i] for i in rows])
        coords = np.concatenate([uv_q, uv_s], axis=1)
        tree = cKDTree(coords)
        neighbours: dict[int, list[int]] = {}
        for a, b in sorted(tree.query_pairs(r=radius, p=np.inf)):
            if (math.hypot(*(uv_q[a] - uv_q[b])) <= radius and math.hypot(*(uv_s[a] - uv_s[b])) <= radius):
                neighbours.setdefault(a, []).append(b)
                neighbours.setdefault(b, []).append(a)
        conf = np.array([correspondences[i].confidence for i in rows])
        order = sorted(range(len(rows)), key=lambda j: (-conf[j], j))
        absorbed = np.zeros(len(rows), dtype=bool)
        for j in order:
            if absorbed[j]:
                continue
            survivors.append(int(rows[j]))
            absorbed[j] = True
            for other in neighbours.get(j, ()):
                absorbed[other] = True
    return sorted(survivors)


# ============================================================================
# Correspondence graph + propagation
# ============================================================================


VertexKey = tuple[str, float, float]


def vertex_key(image: str, pixel: PixelCoord) -> VertexKey:
    return (image, round(pixel.u, VERTEX_KEY_DECIMALS), round(pixel.v, VERTEX_KEY_DECIMALS))


@dataclass
class CorrespondenceGraph:
    """Undirected graph over rays; one edge per vertex pair (most confident kept)."""

    vertices: list[tuple[str, PixelCoord]] = field(default_factory=list)
    index: dict[VertexKey, int] = field(default_factory=dict)
    adjacency: list[dict[int, float]] = field(default_factory=list)
    edge_records: dict[tuple[int, int], Correspondence] = field(default_factory=dict)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edge_records)

    def vertex(self, image: str, pixel: PixelCoord) -> int:
        """Index of the vertex for (image, pixel), created on first sight."""
        key = vertex_key(image, pixel)
        idx = self.index.get(key)
        if idx is None:
            idx = len(self.vertices)
            self.index[key] = idx
            self.vertices.append((image, pixel))
            self.adjacency.append({})
        return idx

    def add_edge(self, c: Correspondence) -> None:
        a = self.vertex(c.image_q, c.p_q)
        b = self.vertex(c.image_s, c.p_s)
        key = (min(a, b), max(a, b))
        current = self.edge_records.get(key)
        if current is not None and current.confidence >= c.confidence:
            return
        self.edge_records[key] = c
        self.adjacency[a][b] = c.confidence
        self.adjacency[b][a] = c.confidence

    def confidence(self, a: int, b: int) -> Optional[float]:
        return self.adjacency[a].get(b)


def build_graph(correspondences: Iterable[Correspondence]) -> CorrespondenceGraph:
    """One vertex per distinct (image, pixel); one undirected edge per correspondence."""
    graph = CorrespondenceGraph()
    for c in correspondences:
        graph.add_edge(c)
    return graph


def propagate(graph: CorrespondenceGraph, d_max: int = 2) -> list[Correspondence]:
    """Original edges plus inferred pairs at path distance 2..d_max.

    Confidence of an inferred pair is the product of edge confidences along
    a shortest path, the largest such product when several shortest paths
    exist. Pairs whose endpoints share an image are never created.
    """
    if not (isinstance(d_max, (int, np.integer)) and d_max >= 1):
        raise PreconditionError(f"d_max must be an integer >= 1, got {d_max!r}")
    result = list(graph.edge_records.values())
    if d_max == 1:
        return result

    propagated: list[Correspondence] = []
    for src in range(graph.num_vertices):
        src_image, src_pixel = graph.vertices[src]
        best = {src: 1.0}
        frontier = [src]
        for depth in range(1, d_max + 1):
            layer: dict[int, float] = {}
            for u in frontier:
                for v, conf in graph.adjacency[u].items():
                    if v in best:
                        continue
                    product = best[u] * conf
                    if product > layer.get(v, -1.0):
                        layer[v] = product
            if not layer:
                break
            best.update(layer)
            frontier = sorted(layer)
            if depth < 2:
                continue
            for dst in frontier:
                dst_image, dst_pixel = graph.vertices[dst]
                if dst <= src or dst_image == src_image:
                    continue
                pair = Correspondence(src_image, dst_image, src_pixel, dst_pixel,
                                      layer[dst], Provenance.PROPAGATED)
                propagated.append(pair.canonical())
    if propagated:
        debug_log(f"propagate: {len(propagated)} inferred pairs (d_max={d_max})")
    return result + propagated


# ============================================================================
# Outlier filtering
# ============================================================================


def filter_projection(
    correspondences: Sequence[Correspondence],
    cameras: Mapping[str, Camera],
    threshold_px: float = 2.0,
) -> tuple[list[Correspondence], FilterReport]:
    """Keep pairs with projected ray distance <= threshold and forward-facing triangulation."""
    require_positive("threshold_px", threshold_px)
    geo = pair_geometry(correspondences, cameras)
    keep = geo.usable & (geo.d_proj <= threshold_px)
    kept = [c for c, k in zip(correspondences, keep) if k]
    report = FilterReport(
        input_count=len(correspondences),
        after_projection_filter=len(kept),
        after_knn_filter=len(kept),
        thresholds={"projection_threshold_px": float(threshold_px)},
        degenerate_count=int(np.count_nonzero(~geo.usable)),
    )
    return kept, report


def filter_statistical(
    correspondences: Sequence[Correspondence],
    cameras: Mapping[str, Camera],
    k: int = 16,
    std_multiplier: float = 2.0,
    ratio_floor: float = 0.0,
    max_rounds: Optional[int] = None,
    exact_limit: int = EXACT_LIMIT,
) -> tuple[list[Correspondence], FilterReport]:
    """Statistical outlier removal on the triangulated midpoints.

    A point goes when its mean kNN distance exceeds
    global_mean + std_multiplier * global_std. A positive `ratio_floor`
    additionally requires it to exceed ratio_floor * global_mean.
    Rounds repeat on the survivors until one removes nothing (or
    `max_rounds` is reached). A round that would leave k or fewer points
    is not applied, so the result always has more than k points and a
    second call removes nothing.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 1):
        raise PreconditionError(f"k must be an integer >= 1, got {k!r}")
    require_positive("std_multiplier", std_multiplier)
    if ratio_floor < 0 or not math.isfinite(ratio_floor):
        raise PreconditionError(f"ratio_floor must be finite and >= 0, got {ratio_floor!r}")

    geo = pair_geometry(correspondences, cameras)
    usable = geo.usable
    candidates = np.flatnonzero(usable)
    if len(candidates) <= k:
        raise PreconditionError(f"statistical filter needs more than k={k} points, got {len(candidates)}")
    points = geo.midpoint[candidates]
    alive = np.ones(len(candidates), dtype=bool)

    rounds = 0
    threshold = math.nan
    while max_rounds is None or rounds < max_rounds:
        live = np.flatnonzero(alive)
        mean_d = mean_knn_distances(points[live], k, exact_limit)
        mu = float(np.mean(mean_d))
        sd = float(np.std(mean_d))
        threshold = mu + std_multiplier * sd
        tol = 1e-12 * max(1.0, abs(threshold))
        remove = (mean_d > threshold + tol) & (mean_d > ratio_floor * mu)
        rounds += 1
        if not np.any(remove):
            break
        if len(live) - np.count_nonzero(remove) <= k:
            warn_once(
                "sor-too-few",
                f"statistical filter stopped: round {rounds} would leave "
                f"{len(live) - np.count_nonzero(remove)} of {len(live)} points for k={k}",
            )
            break
        alive[live[remove]] = False

    keep_rows = set(candidates[alive].tolist())
    kept = [c for i, c in enumerate(correspondences) if i in keep_rows]
    report = FilterReport(
        input_count=len(correspondences),
        after_projection_filter=len(correspondences),
        after_knn_filter=len(kept),
        thresholds={
            "k": int(k),
            "std_multiplier": float(std_multiplier),
            "ratio_floor": float(ratio_floor),
            "distance_threshold": threshold,
            "rounds": rounds,
        },
        degenerate_count=int(np.count_nonzero(~usable)),
    )
    return kept, report


# ============================================================================
# Pipeline + point cloud
# ============================================================================


def coverage_stats(correspondences: Sequence[Correspondence], cameras: Mapping[str, Camera]) -> dict[str, dict[str, float]]:
    """Per image: distinct supervised pixels and their share of the image (percent)."""
    pixels: dict[str, set[tuple[int, int]]] = {name: set() for name in sorted(cameras)}
    for c in correspondences:
        for image, p in ((c.image_q, c.p_q), (c.image_s, c.p_s)):
            pixels.setdefault(image, set()).add((int(round(p.u)), int(round(p.v))))
    stats = {}
    for image in sorted(pixels):
        count = len(pixels[image])
        area = cameras[image].width * cameras[image].height if image in cameras else 0
        stats[image] = {"pixels": count, "percent": 100.0 * count / area if area else 0.0}
    return stats


def preprocess_pipeline(
    raw_sets: Sequence[Sequence[Correspondence]],
    transforms: Sequence[PixelMap],
    cameras: Mapping[str, Camera],
    config: Optional[PreprocessConfig] = None,
) -> tuple[list[Correspondence], PipelineReport]:
    """merge_augmented -> build_graph -> propagate -> filter_projection -> filter_statistical."""
    config = config or PreprocessConfig()
    if len(raw_sets) != len(transforms):
        raise PreconditionError(f"got {len(raw_sets)} correspondence sets but {len(transforms)} transforms")
    if not config.augment:
        pairs = [(s, t) for s, t in zip(raw_sets, transforms) if t.is_identity]
        raw_sets = [s for s, _ in pairs]
        transforms = [t for _, t in pairs]

    raw_count = sum(len(s) for s in raw_sets)
    sizes = {name: (cam.width, cam.height) for name, cam in cameras.items()}
    merged = merge_augmented(raw_sets, transforms, sizes, config.dedup_radius_px)
    graph = build_graph(merged.correspondences)
    expanded = propagate(graph, config.d_max if config.propagate else 1)
    propagated_count = len(expanded) - graph.num_edges

    after_projection = expanded
    after_knn = expanded
    thresholds: dict[str, Any] = {}
    degenerate = 0
    if config.filter and expanded:
        after_projection, proj_report = filter_projection(expanded, cameras, config.projection_threshold_px)
        thresholds.update(proj_report.thresholds)
        degenerate = proj_report.degenerate_count
        if len(after_projection) > config.knn_k:
            after_knn, knn_report = filter_statistical(
                after_projection, cameras, config.knn_k, config.std_multiplier,
                config.ratio_floor, config.max_rounds, config.exact_knn_limit,
            )
            thresholds.update(knn_report.thresholds)
        else:
            warn_once("pipeline-skip-sor",
                      f"statistical filter skipped: {len(after_projection)} correspondences for k={config.knn_k}")
            after_knn = after_projection

    report = PipelineReport(
        input_count=len(expanded),
        after_projection_filter=len(after_projection),
        after_knn_filter=len(after_knn),
        thresholds=thresholds,
        degenerate_count=degenerate,
        raw_count=raw_count,
        merged_count=len(merged.correspondences),
        dropped_out_of_bounds=merged.dropped_out_of_bounds,
        duplicates_collapsed=merged.duplicates_collapsed,
        propagated_count=propagated_count,
        coverage=coverage_stats(after_knn, cameras),
    )
    debug_log(
        f"preprocess_pipeline: raw={raw_count} merged={report.merged_count} "
        f"propagated={propagated_count} kept={report.after_knn_filter} "
        f"survival={report.survival_fraction:.4f}"
    )
    return after_knn, report


def triangulate_cloud(correspondences: Sequence[Correspondence], cameras: Mapping[str, Camera]) -> PointCloud:
    """One midpoint per correspondence; degenerate or backward pairs skipped and counted."""
    if not correspondences:
        return PointCloud(points=np.zeros((0, 3)), confidence=np.zeros(0), skipped=0)
    geo = pair_geometry(correspondences, cameras)
    ok = (~geo.degenerate) & (geo.t_q >= 0.0) & (geo.t_s >= 0.0)
    conf = np.array([c.confidence for c in correspondences], dtype=np.float64)
    return PointCloud(points=geo.midpoint[ok], confidence=conf[ok], skipped=int(np.count_nonzero(~ok)))
