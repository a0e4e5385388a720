"""Cameras, rays, projection, two-ray triangulation, projected ray distance.

Pixel convention: pixel centers sit at integer coordinates, origin at the
top-left, u grows rightward and v downward. An image of width W therefore
covers u in [-0.5, W - 0.5]. Camera frame: x right, y down, z forward.

Every ray direction is unit length, so a ray parameter t is the Euclidean
distance from the ray origin. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cnerf.errors import DegenerateGeometryError, DomainError, PreconditionError


# Tolerances
ROTATION_TOL = 1e-9
UNIT_NORM_TOL = 1e-12
PARALLEL_TOL = 1e-10


# ============================================================================
# Domain types
# ============================================================================


@dataclass(frozen=True)
class PixelCoord:
    """Continuous pixel coordinate (sub-pixel precision allowed)."""

    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise DomainError(f"pixel coordinate must be finite, got ({self.u}, {self.v})", (self.u, self.v))

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: intrinsics K, world->camera pose (R, t), image size."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"camera {self.name!r}: image size must be positive, got {self.width}x{self.height}")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError(f"camera {self.name!r}: non-finite parameters")
        ortho = np.max(np.abs(R @ R.T - np.eye(3)))
        if ortho > ROTATION_TOL:
            raise DomainError(f"camera {self.name!r}: rotation not orthonormal (residual {ortho:.3e})", ortho)
        det = float(np.linalg.det(R))
        if abs(det - 1.0) > ROTATION_TOL:
            raise DomainError(f"camera {self.name!r}: rotation determinant {det!r} != +1", det)
        if K[1, 0] != 0.0 or K[2, 0] != 0.0 or K[2, 1] != 0.0 or K[2, 2] != 1.0:
            raise DomainError(f"camera {self.name!r}: intrinsics must be upper-triangular with K[2, 2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise DomainError(f"camera {self.name!r}: focal lengths must be positive", (K[0, 0], K[1, 1]))
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise DomainError(f"camera {self.name!r}: principal point outside image", (K[0, 2], K[1, 2]))
        object.__setattr__(self, "_K_inv", np.linalg.inv(K))

    @property
    def center(self) -> np.ndarray:
        """Camera center o = -R^T t in world coordinates."""
        return -(self.rotation.T @ self.translation)

    @property
    def diagonal(self) -> float:
        """Image diagonal in pixels."""
        return math.hypot(self.width, self.height)

    def contains(self, u, v) -> np.ndarray:
        """True where (u, v) lies inside the image area."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        """World points (n, 3) -> camera-frame points (n, 3).

        Written component-wise so results do not depend on BLAS blocking.
        """
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        R, t = self.rotation, self.translation
        x = R[0, 0] * P[:, 0] + R[0, 1] * P[:, 1] + R[0, 2] * P[:, 2] + t[0]
        y = R[1, 0] * P[:, 0] + R[1, 1] * P[:, 1] + R[1, 2] * P[:, 2] + t[1]
        z = R[2, 0] * P[:, 0] + R[2, 1] * P[:, 1] + R[2, 2] * P[:, 2] + t[2]
        return np.stack([x, y, z], axis=1)

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (n, 3) -> (pixels (n, 2), depths (n,)).

        No depth check: rows with depth <= 0 come back as garbage and the
        caller masks them using the returned depths.
        """
        Xc = self.to_camera_frame(points)
        K = self.intrinsics
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = Xc[:, 0] / z
            yn = Xc[:, 1] / z
        u = K[0, 0] * xn + K[0, 1] * yn + K[0, 2]
        v = K[1, 1] * yn + K[1, 2]
        return np.stack([u, v], axis=1), z

    def pixel_directions(self, uv: np.ndarray) -> np.ndarray:
        """Unit world-frame directions through pixels (n, 2)."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        Ki = self._K_inv
        xc = Ki[0, 0] * uv[:, 0] + Ki[0, 1] * uv[:, 1] + Ki[0, 2]
        yc = Ki[1, 0] * uv[:, 0] + Ki[1, 1] * uv[:, 1] + Ki[1, 2]
        zc = Ki[2, 0] * uv[:, 0] + Ki[2, 1] * uv[:, 1] + Ki[2, 2]
        R = self.rotation
        # world = R^T @ camera
        dx = R[0, 0] * xc + R[1, 0] * yc + R[2, 0] * zc
        dy = R[0, 1] * xc + R[1, 1] * yc + R[2, 1] * zc
        dz = R[0, 2] * xc + R[1, 2] * yc + R[2, 2] * zc
        d = np.stack([dx, dy, dz], axis=1)
        return d / np.sqrt(np.sum(d * d, axis=1))[:, None]


@dataclass(frozen=True, eq=False)
class Ray:
    """r(t) = o + t d with unit d and 0 <= t_near < t_far."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        norm = math.sqrt(float(d @ d))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise DomainError(f"ray direction must be unit length, got norm {norm!r}", norm)
        if not (0.0 <= self.t_near < self.t_far):
            raise DomainError(f"ray bounds must satisfy 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]",
                              (self.t_near, self.t_far))

    def at(self, t) -> np.ndarray:
        """Point(s) on the ray; t may be a scalar or an array."""
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True, eq=False)
class TriangulationResult:
    """Closest points of two rays and their midpoint."""

    x_q: np.ndarray
    x_s: np.ndarray
    midpoint: np.ndarray
    gap: float
    t_q: float
    t_s: float

    @property
    def forward_facing(self) -> bool:
        """False when either closest point lies behind its ray origin."""
        return self.t_q >= 0.0 and self.t_s >= 0.0


# ============================================================================
# Camera construction
# ============================================================================


def intrinsics_from_fov(width: int, height: int, fov_x_deg: float) -> np.ndarray:
    """Square-pixel intrinsics with the principal point at the image center."""
    f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2.0)
    return np.array([[f, 0.0, (width - 1) / 2.0],
                     [0.0, f, (height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def look_at(eye, target, up, intrinsics: np.ndarray, width: int, height: int, name: str = "") -> Camera:
    """Camera at `eye` looking at `target` (y-down image convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise DomainError("look_at: up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    t = -R @ eye
    return Camera(intrinsics=intrinsics, rotation=R, translation=t, width=width, height=height, name=name)


# ============================================================================
# Projection and back-projection
# ============================================================================


def project(camera: Camera, point) -> PixelCoord:
    """Pinhole projection of one world point; the point must be in front of the camera."""
    pixels, depths = camera.project_points(np.asarray(point, dtype=np.float64).reshape(1, 3))
    depth = float(depths[0])
    if not depth > 0.0:
        raise DomainError(f"point is at or behind the camera plane of {camera.name!r} (depth {depth!r})", depth)
    return PixelCoord(float(pixels[0, 0]), float(pixels[0, 1]))


def pixel_to_ray(camera: Camera, pixel: PixelCoord, t_near: float = 0.0, t_far: float = math.inf) -> Ray:
    """Back-project a pixel into a unit-direction world ray from the camera center."""
    if not bool(camera.contains(pixel.u, pixel.v)):
        raise DomainError(
            f"pixel ({pixel.u}, {pixel.v}) outside image {camera.width}x{camera.height} of {camera.name!r}",
            (pixel.u, pixel.v),
        )
    d = camera.pixel_directions(np.array([[pixel.u, pixel.v]]))[0]
    return Ray(camera.center, d, t_near, t_far)


def pixels_to_rays(camera: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized back-projection: (origins (n, 3), unit directions (n, 3))."""
    d = camera.pixel_directions(uv)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


# ============================================================================
# Triangulation
# ============================================================================


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot product with a fixed summation order."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def closest_points(ray_q: Ray, ray_s: Ray) -> TriangulationResult:
    """Closest points between two lines via the 2x2 normal equations.

    Unit directions make both diagonal terms exactly 1, which keeps the
    solution symmetric bit-for-bit under swapping the two rays.
    """
    b = float(_dot(ray_q.direction, ray_s.direction))
    if abs(1.0 - abs(b)) <= PARALLEL_TOL:
        raise DegenerateGeometryError(abs(b))
    w0 = ray_q.origin - ray_s.origin
    d = float(_dot(ray_q.direction, w0))
    e = float(_dot(ray_s.direction, w0))
    denom = 1.0 - b * b
    t_q = (b * e - d) / denom
    t_s = (e - b * d) / denom
    x_q = ray_q.origin + t_q * ray_q.direction
    x_s = ray_s.origin + t_s * ray_s.direction
    diff = x_q - x_s
    return TriangulationResult(
        x_q=x_q,
        x_s=x_s,
        midpoint=0.5 * (x_q + x_s),
        gap=math.sqrt(float(_dot(diff, diff))),
        t_q=t_q,
        t_s=t_s,
    )


@dataclass
class TriangulationBatch:
    """Vectorized closest_points output; rows flagged degenerate hold NaN."""

    x_q: np.ndarray
    x_s: np.ndarray
    t_q: np.ndarray
    t_s: np.ndarray
    degenerate: np.ndarray
    midpoint: np.ndarray = field(init=False)

    def __post_init__(self):
        self.midpoint = 0.5 * (self.x_q + self.x_s)

    @property
    def forward_facing(self) -> np.ndarray:
        return (~self.degenerate) & (self.t_q >= 0.0) & (self.t_s >= 0.0)


def closest_points_batch(o_q: np.ndarray, d_q: np.ndarray, o_s: np.ndarray, d_s: np.ndarray) -> TriangulationBatch:
    """Row-wise closest_points over (n, 3) arrays, same arithmetic as the scalar form."""
    b = _dot(d_q, d_s)
    degenerate = np.abs(1.0 - np.abs(b)) <= PARALLEL_TOL
    w0 = o_q - o_s
    d = _dot(d_q, w0)
    e = _dot(d_s, w0)
    denom = np.where(degenerate, np.nan, 1.0 - b * b)
    t_q = (b * e - d) / denom
    t_s = (e - b * d) / denom
    x_q = o_q + t_q[:, None] * d_q
    x_s = o_s + t_s[:, None] * d_s
    return TriangulationBatch(x_q=x_q, x_s=x_s, t_q=t_q, t_s=t_s, degenerate=degenerate)


def projected_ray_distance(cam_q: Camera, cam_s: Camera, p_q: PixelCoord, p_s: PixelCoord) -> float:
    """Mean pixel distance between each correspondence and the other ray's closest point."""
    ray_q = pixel_to_ray(cam_q, p_q)
    ray_s = pixel_to_ray(cam_s, p_s)
    tri = closest_points(ray_q, ray_s)
    proj_q = project(cam_q, tri.x_s)
    proj_s = project(cam_s, tri.x_q)
    err_q = math.hypot(proj_q.u - p_q.u, proj_q.v - p_q.v)
    err_s = math.hypot(proj_s.u - p_s.u, proj_s.v - p_s.v)
    return (err_q + err_s) / 2.0


def projected_ray_distance_batch(
    cam_q: Camera, cam_s: Camera, uv_q: np.ndarray, uv_s: np.ndarray
) -> tuple[np.ndarray, TriangulationBatch]:
    """Vectorized d_proj for pairs between two cameras.

    Returns (d_proj, triangulation). d_proj is NaN where the rays are
    degenerate or a closest point reprojects at or behind a camera.
    """
    uv_q = np.asarray(uv_q, dtype=np.float64).reshape(-1, 2)
    uv_s = np.asarray(uv_s, dtype=np.float64).reshape(-1, 2)
    o_q, d_q = pixels_to_rays(cam_q, uv_q)
    o_s, d_s = pixels_to_rays(cam_s, uv_s)
    tri = closest_points_batch(o_q, d_q, o_s, d_s)
    proj_q, depth_q = cam_q.project_points(tri.x_s)
    proj_s, depth_s = cam_s.project_points(tri.x_q)
    err_q = np.hypot(proj_q[:, 0] - uv_q[:, 0], proj_q[:, 1] - uv_q[:, 1])
    err_s = np.hypot(proj_s[:, 0] - uv_s[:, 0], proj_s[:, 1] - uv_s[:, 1])
    dist = (err_q + err_s) / 2.0
    valid = (~tri.degenerate) & (depth_q > 0.0) & (depth_s > 0.0)
    return np.where(valid, dist, np.nan), tri


def require_positive(name: str, value: float) -> None:
    """PreconditionError unless value is a finite positive number."""
    if not (isinstance(value, (int, float, np.floating, np.integer)) and math.isfinite(value) and value > 0):
        raise PreconditionError(f"{name} must be finite and > 0, got {value!r}")


def camera_pair_key(cameras: dict, image_q: str, image_s: str) -> tuple[Camera, Camera]:
    """Look up both cameras of a pair, raising PreconditionError on unknown ids."""
    try:
        return cameras[image_q], cameras[image_s]
    except KeyError as exc:
        raise PreconditionError(f"no camera for image id {exc.args[0]!r}") from None


def as_points(points) -> np.ndarray:
    """Coerce to a float64 (n, 3) array."""
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)

