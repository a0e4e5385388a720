"""Canonical test scenes and the camera rig that looks at them.

World frame: y up. Every scene sits around the origin in front of a
textured backdrop plane at z = BACKDROP_Z; cameras sit on an arc of
radius `rig_radius` on the -z side, all looking at the origin.
"""

from __future__ import annotations

import math

import numpy as np

from cnerf.errors import PreconditionError
from cnerf.geometry import Camera, intrinsics_from_fov, look_at
from cnerf.models import SCENE_NAMES, SynthConfig
from cnerf.synth.scene import AnalyticScene, Box, Rectangle, Sphere, Texture

BACKDROP_Z = 2.0
WORLD_UP = (0.0, 1.0, 0.0)


def _backdrop() -> Rectangle:
    return Rectangle(
        center=(0.0, 0.0, BACKDROP_Z),
        normal=(0.0, 0.0, -1.0),
        u_axis=(1.0, 0.0, 0.0),
        half_u=12.0,
        half_v=9.0,
        texture=Texture("checker", (0.9, 0.85, 0.7), (0.25, 0.3, 0.45), 0.6),
    )


def plane_sphere() -> AnalyticScene:
    """Textured unit sphere in front of the backdrop."""
    return AnalyticScene("plane_sphere", [
        Sphere((0.0, 0.0, 0.0), 1.0, Texture("stripes", (0.95, 0.3, 0.2), (0.2, 0.6, 0.9), 0.5)),
        _backdrop(),
    ])


def three_boxes() -> AnalyticScene:
    """Three boxes at different depths; they occlude each other from the side views."""
    return AnalyticScene("three_boxes", [
        Box((-1.4, -0.8, -0.4), (-0.6, 0.2, 0.4), Texture("checker", (0.9, 0.9, 0.3), (0.4, 0.2, 0.1), 0.25)),
        Box((-0.3, -0.8, 0.3), (0.5, 0.9, 1.1), Texture("rings", (0.3, 0.8, 0.4), (0.1, 0.2, 0.5), 0.4)),
        Box((0.7, -0.8, -0.9), (1.4, -0.1, -0.2), Texture("stripes", (0.8, 0.4, 0.8), (0.9, 0.9, 0.9), 0.3)),
        _backdrop(),
    ])


def horns(spheres_per_horn: int = 14, tube_radius: float = 0.12) -> AnalyticScene:
    """Two thin curved horns (chains of small spheres) rising from a base."""
    prims = []
    texture = Texture("rings", (0.95, 0.8, 0.6), (0.5, 0.25, 0.1), 0.3)
    for side in (-1.0, 1.0):
        for k in range(spheres_per_horn):
            angle = math.pi * k / (2 * (spheres_per_horn - 1))
            x = side * (0.3 + 1.0 * (1.0 - math.cos(angle)))
            y = -0.6 + 1.4 * math.sin(angle)
            prims.append(Sphere((x, y, 0.0), tube_radius, texture))
    prims.append(Sphere((0.0, -0.7, 0.0), 0.45, Texture("checker", (0.7, 0.7, 0.75), (0.3, 0.3, 0.35), 0.2)))
    prims.append(_backdrop())
    return AnalyticScene("horns", prims)


SCENES = {
    "plane_sphere": plane_sphere,
    "three_boxes": three_boxes,
    "horns": horns,
}


def make_scene(name: str) -> AnalyticScene:
    if name not in SCENES:
        raise PreconditionError(f"unknown scene {name!r}; choose from {', '.join(SCENE_NAMES)}")
    return SCENES[name]()


def _arc_camera(angle_deg: float, config: SynthConfig, name: str) -> Camera:
    theta = math.radians(angle_deg)
    eye = (config.rig_radius * math.sin(theta), config.rig_height, -config.rig_radius * math.cos(theta))
    K = intrinsics_from_fov(config.width, config.height, config.fov_deg)
    return look_at(eye, (0.0, 0.0, 0.0), WORLD_UP, K, config.width, config.height, name)


def make_rig(config: SynthConfig) -> tuple[list[Camera], list[Camera]]:
    """Training views spread over the arc; test views interleaved strictly inside it."""
    half = config.rig_arc_deg / 2.0
    train_angles = np.linspace(-half, half, config.n_train)
    test_angles = np.linspace(-half, half, config.n_test + 2)[1:-1]
    train = [_arc_camera(a, config, f"train_{i:02d}") for i, a in enumerate(train_angles)]
    test = [_arc_camera(a, config, f"test_{i:02d}") for i, a in enumerate(test_angles)]
    return train, test
