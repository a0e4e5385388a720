"""Configuration dataclasses used across cnerf.

Pure data definitions: SynthConfig, PreprocessConfig, FieldConfig,
TrainConfig, EvalConfig and AblationConfig each own one section of the
root ExperimentConfig. Merging user overrides into them lives in
`cnerf/config_merge.py`; precedence (file / env / flags) lives in
`cnerf/config.py`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


# ============================================================================
# Closed vocabularies
# ============================================================================

SCENE_NAMES: tuple[str, ...] = ("plane_sphere", "three_boxes", "horns")

ACTIVATIONS: tuple[str, ...] = ("relu", "softplus")


# ============================================================================
# Section dataclasses
# ============================================================================


@dataclass
class SynthConfig:
    """Scene rendering, camera rig and correspondence corruption."""

    width: int = 64
    height: int = 48
    fov_deg: float = 50.0
    n_train: int = 3
    n_test: int = 8
    rig_radius: float = 4.0
    rig_arc_deg: float = 40.0
    rig_height: float = 0.6
    near: float = 2.0
    far: float = 10.0
    points_per_view: int = 1200
    pair_recall: float = 0.7
    pixel_noise_std: float = 0.0
    outlier_fraction: float = 0.0
    confidence_falloff_px: float = 8.0
    augment: bool = True


@dataclass
class PreprocessConfig:
    """Correspondence prior pipeline switches and thresholds."""

    augment: bool = True
    propagate: bool = True
    filter: bool = True
    d_max: int = 2
    dedup_radius_px: float = 0.5
    projection_threshold_px: float = 2.0
    knn_k: int = 16
    std_multiplier: float = 2.0
    ratio_floor: float = 0.0
    max_rounds: Optional[int] = None
    exact_knn_limit: int = 20_000


@dataclass
class FieldConfig:
    """Radiance field architecture."""

    num_frequencies_position: int = 6
    num_frequencies_direction: int = 2
    hidden_layers: int = 4
    hidden_width: int = 64
    color_width: int = 32
    activation: str = "relu"


@dataclass
class TrainConfig:
    """Optimization schedule and loss weights."""

    iterations: int = 15_000
    batch_rays: int = 1024
    max_pairs: int = 512
    samples_per_ray: int = 64
    lr: float = 5e-4
    lr_final_ratio: float = 0.1
    lambda_pixel: float = 0.1
    lambda_depth: float = 0.1
    log_every: int = 500
    trace_views: int = 2
    trace_stride: int = 4


@dataclass
class EvalConfig:
    """Held-out view evaluation."""

    samples_per_ray: int = 64
    chamfer_stride: int = 1
    write_images: bool = True


@dataclass
class AblationConfig:
    """Sweeps run by the ablate-noise and ablate-losses commands."""

    noise_levels: list[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0])
    loss_settings: list[list[float]] = field(
        default_factory=lambda: [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1]]
    )


# ============================================================================
# Root configuration
# ============================================================================


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; serialized as config.json next to outputs."""

    scene: str = "plane_sphere"
    scene_path: Optional[str] = None
    camera_path: Optional[str] = None
    output_dir: str = "cnerf-out"
    seed: int = 0
    threads: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: FieldConfig = field(default_factory=FieldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
