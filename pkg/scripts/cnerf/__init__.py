"""cnerf: correspondence-supervised radiance fields from sparse views.

Loaded by `scripts/corres-nerf.py` (the entry point) after a
`sys.path.insert` makes this directory importable. The re-exports below
are the public surface; internal code imports from the home module
(e.g. `from cnerf.corres import propagate`).
"""

from cnerf.corres import (
    Correspondence,
    CorrespondenceGraph,
    FilterReport,
    PipelineReport,
    PixelMap,
    PointCloud,
    Provenance,
    build_graph,
    filter_projection,
    filter_statistical,
    merge_augmented,
    preprocess_pipeline,
    propagate,
    triangulate_cloud,
)
from cnerf.errors import CnerfError, InvariantError, UsageError
from cnerf.field import AdamState, FieldArchitecture, FieldParams, evaluate, init_params, optimizer_step
from cnerf.geometry import (
    Camera,
    PixelCoord,
    Ray,
    TriangulationResult,
    closest_points,
    pixel_to_ray,
    project,
    projected_ray_distance,
)
from cnerf.models import ExperimentConfig
from cnerf.render import LossWeights, color_loss, depth_loss, pixel_loss, render_ray, sample_stratified, total_loss
from cnerf.training import View, render_image, train

__all__ = [
    "AdamState",
    "Camera",
    "CnerfError",
    "Correspondence",
    "CorrespondenceGraph",
    "ExperimentConfig",
    "FieldArchitecture",
    "FieldParams",
    "FilterReport",
    "InvariantError",
    "LossWeights",
    "PipelineReport",
    "PixelCoord",
    "PixelMap",
    "PointCloud",
    "Provenance",
    "Ray",
    "TriangulationResult",
    "UsageError",
    "View",
    "build_graph",
    "closest_points",
    "color_loss",
    "depth_loss",
    "evaluate",
    "filter_projection",
    "filter_statistical",
    "init_params",
    "merge_augmented",
    "optimizer_step",
    "pixel_loss",
    "pixel_to_ray",
    "preprocess_pipeline",
    "project",
    "projected_ray_distance",
    "propagate",
    "render_image",
    "render_ray",
    "sample_stratified",
    "total_loss",
    "train",
    "triangulate_cloud",
]
