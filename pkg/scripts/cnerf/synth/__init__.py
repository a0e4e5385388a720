"""Synthetic scenes, ground-truth rendering, a simulated matcher and quality metrics."""

from cnerf.synth.correspondences import (
    AUGMENTATION_TRANSFORMS,
    CorruptionSpec,
    SynthesisResult,
    TrackSet,
    synthesize_augmented_sets,
    synthesize_correspondences,
    synthesize_tracks,
)
from cnerf.synth.metrics import EvalReport, chamfer_l1, depth_mae, depth_to_points, psnr, ssim
from cnerf.synth.scene import AnalyticScene, Box, Rectangle, Sphere, Texture, render_ground_truth
from cnerf.synth.scenes import SCENES, make_rig, make_scene

__all__ = [
    "AUGMENTATION_TRANSFORMS",
    "AnalyticScene",
    "Box",
    "CorruptionSpec",
    "EvalReport",
    "Rectangle",
    "SCENES",
    "Sphere",
    "SynthesisResult",
    "Texture",
    "TrackSet",
    "chamfer_l1",
    "depth_mae",
    "depth_to_points",
    "make_rig",
    "make_scene",
    "psnr",
    "render_ground_truth",
    "ssim",
    "synthesize_augmented_sets",
    "synthesize_correspondences",
    "synthesize_tracks",
]
