"""Analytic scenes: textured spheres, bounded planes and boxes, ray cast exactly.

Albedo is a procedural function of the 3D hit point, no shading. A ray
that hits nothing takes the background color and infinite depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

import numpy as np

from cnerf.errors import DomainError, InputFormatError
from cnerf.geometry import Camera, as_points, pixels_to_rays
from cnerf.workers import chunk_bounds, ordered_map

# Minimum ray parameter accepted as a hit.
HIT_EPSILON = 1e-9

TEXTURE_KINDS = ("solid", "checker", "stripes", "rings")


# ============================================================================
# Textures
# ============================================================================


@dataclass(frozen=True)
class Texture:
    """Procedural albedo: blend of color_a and color_b driven by the 3D point."""

    kind: str = "solid"
    color_a: tuple[float, float, float] = (0.8, 0.8, 0.8)
    color_b: tuple[float, float, float] = (0.2, 0.2, 0.2)
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise DomainError(f"unknown texture kind {self.kind!r}", self.kind)
        for color in (self.color_a, self.color_b):
            if len(color) != 3 or min(color) < 0.0 or max(color) > 1.0:
                raise DomainError(f"texture colors must lie in [0, 1]^3, got {color!r}", color)
        if not self.scale > 0:
            raise DomainError(f"texture scale must be > 0, got {self.scale!r}", self.scale)

    def albedo(self, points: np.ndarray) -> np.ndarray:
        P = as_points(points)
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(a, P.shape).copy()
        if self.kind == "checker":
            cells = np.floor(P / self.scale).astype(np.int64).sum(axis=1)
            mix = (cells % 2).astype(np.float64)
        elif self.kind == "stripes":
            mix = 0.5 + 0.5 * np.sin(2.0 * math.pi * (P[:, 0] + P[:, 1]) / self.scale)
        else:
            mix = 0.5 + 0.5 * np.cos(2.0 * math.pi * np.sqrt(np.sum(P * P, axis=1)) / self.scale)
        return (1.0 - mix)[:, None] * a + mix[:, None] * b

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "color_a": list(self.color_a), "color_b": list(self.color_b), "scale": self.scale}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Texture:
        return cls(
            kind=data.get("kind", "solid"),
            color_a=tuple(float(c) for c in data.get("color_a", (0.8, 0.8, 0.8))),
            color_b=tuple(float(c) for c in data.get("color_b", (0.2, 0.2, 0.2))),
            scale=float(data.get("scale", 0.5)),
        )


# ============================================================================
# Primitives
# ============================================================================


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise DomainError(f"sphere radius must be > 0, got {self.radius!r}", self.radius)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Nearest positive hit distance per ray (inf on a miss)."""
        oc = origins - self.center
        b = _dot(directions, oc)
        c = _dot(oc, oc) - self.radius * self.radius
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        near = -b - root
        far = -b + root
        t = np.where(near > HIT_EPSILON, near, np.where(far > HIT_EPSILON, far, np.inf))
        return np.where(disc >= 0.0, t, np.inf)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius,
                "texture": self.texture.to_dict()}


@dataclass(frozen=True, eq=False)
class Rectangle:
    """Bounded plane patch: center, unit normal, in-plane unit u axis, half extents."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_u: float
    half_v: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        u = np.asarray(self.u_axis, dtype=np.float64).reshape(3)
        n = n / np.linalg.norm(n)
        u = u - _dot(u, n) * n
        norm_u = np.linalg.norm(u)
        if norm_u < 1e-12:
            raise DomainError("rectangle u_axis must not be parallel to its normal")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "u_axis", u / norm_u)
        if not (self.half_u > 0 and self.half_v > 0):
            raise DomainError("rectangle half extents must be > 0", (self.half_u, self.half_v))

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        denom = _dot(directions, self.normal)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = _dot(self.center - origins, self.normal) / denom
        ok = (np.abs(denom) > 1e-12) & (t > HIT_EPSILON)
        rel = origins + np.where(ok, t, 0.0)[:, None] * directions - self.center
        inside = (np.abs(_dot(rel, self.u_axis)) <= self.half_u) & (np.abs(_dot(rel, self.v_axis)) <= self.half_v)
        return np.where(ok & inside, t, np.inf)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "rectangle", "center": self.center.tolist(), "normal": self.normal.tolist(),
                "u_axis": self.u_axis.tolist(), "half_u": self.half_u, "half_v": self.half_v,
                "texture": self.texture.to_dict()}


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box [lo, hi]."""

    lo: np.ndarray
    hi: np.ndarray
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise DomainError(f"box needs lo < hi on every axis, got {lo.tolist()} / {hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / directions
            t1 = (self.lo - origins) * inv
            t2 = (self.hi - origins) * inv
        t_enter = np.fmax.reduce(np.fmin(t1, t2), axis=1)
        t_exit = np.fmin.reduce(np.fmax(t1, t2), axis=1)
        t = np.where(t_enter > HIT_EPSILON, t_enter, t_exit)
        hit = (t_exit >= t_enter) & (t > HIT_EPSILON)
        return np.where(hit, t, np.inf)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist(), "texture": self.texture.to_dict()}


Primitive = Union[Sphere, Rectangle, Box]


def primitive_from_dict(data: Mapping[str, Any]) -> Primitive:
    kind = data.get("type")
    texture = Texture.from_dict(data.get("texture", {}))
    if kind == "sphere":
        return Sphere(data["center"], float(data["radius"]), texture)
    if kind == "rectangle":
        return Rectangle(data["center"], data["normal"], data["u_axis"],
                         float(data["half_u"]), float(data["half_v"]), texture)
    if kind == "box":
        return Box(data["lo"], data["hi"], texture)
    raise KeyError(f"unknown primitive type {kind!r}")


# ============================================================================
# Scene
# ============================================================================


@dataclass(eq=False)
class AnalyticScene:
    name: str
    primitives: list[Primitive]
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(nearest hit distance, primitive index) per ray; misses give (inf, -1)."""
        origins = as_points(origins)
        directions = as_points(directions)
        best_t = np.full(len(origins), np.inf)
        best_i = np.full(len(origins), -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origins, directions)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, i, best_i)
        return best_t, best_i

    def shade(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(albedo (n, 3), hit distance (n,)) per ray."""
        origins = as_points(origins)
        directions = as_points(directions)
        t, idx = self.intersect(origins, directions)
        color = np.broadcast_to(np.asarray(self.background, dtype=np.float64), origins.shape).copy()
        for i, prim in enumerate(self.primitives):
            rows = np.flatnonzero(idx == i)
            if len(rows):
                hits = origins[rows] + t[rows, None] * directions[rows]
                color[rows] = prim.texture.albedo(hits)
        return color, t

    def visible_from(self, camera: Camera, points: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
        """True where a point projects inside the image and nothing occludes it."""
        P = as_points(points)
        pixels, depths = camera.project_points(P)
        in_front = depths > 0.0
        inside = in_front & camera.contains(np.where(in_front, pixels[:, 0], -1.0),
                                            np.where(in_front, pixels[:, 1], -1.0))
        origin = camera.center
        offset = P - origin
        dist = np.sqrt(_dot(offset, offset))
        safe = np.where(dist > 0, dist, 1.0)
        directions = offset / safe[:, None]
        t, _ = self.intersect(np.broadcast_to(origin, P.shape), directions)
        unoccluded = t >= dist * (1.0 - rel_tol)
        return inside & unoccluded & (dist > 0)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "background": list(self.background),
                "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], source: Optional[str] = None) -> AnalyticScene:
        try:
            prims = [primitive_from_dict(p) for p in data["primitives"]]
            return cls(str(data.get("name", "custom")), prims,
                       tuple(float(c) for c in data.get("background", (0.0, 0.0, 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(source or "<scene>", 1, f"invalid scene description: {exc}") from None


# ============================================================================
# Ground truth
# ============================================================================

# Rays per ground-truth chunk.
GT_CHUNK_RAYS = 4096


def render_ground_truth(
    scene: AnalyticScene, camera: Camera, threads: Optional[int] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel nearest-hit albedo (h, w, 3) and hit distance (h, w); misses get inf depth."""
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    origins, directions = pixels_to_rays(camera, uv)

    def work(bounds):
        start, stop = bounds
        return scene.shade(origins[start:stop], directions[start:stop])

    parts = ordered_map(work, chunk_bounds(len(uv), GT_CHUNK_RAYS), threads)
    image = np.concatenate([p[0] for p in parts]).reshape(camera.height, camera.width, 3)
    depth = np.concatenate([p[1] for p in parts]).reshape(camera.height, camera.width)
    return image, depth


def hit_points(scene: AnalyticScene, camera: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World hit points for pixels uv (n, 2) and a hit mask."""
    origins, directions = pixels_to_rays(camera, uv)
    t, _ = scene.intersect(origins, directions)
    hit = np.isfinite(t)
    points = origins + np.where(hit, t, 0.0)[:, None] * directions
    return points, hit

