"""Projection of 3D Gaussians to screen-space conics and closed-form extents.

Everything here is float64. Pixel coordinates follow the integer-index
convention: pixel (col, row) sits at the point (col, row), so the image
center is ((width - 1) / 2, (height - 1) / 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Low-pass dilation added to both diagonal entries of the 2D covariance.
COV2D_DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0


class NonFiniteInputError(ValueError):
    """Raised when a Gaussian or camera carries NaN/inf values."""


@dataclass
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity = float(self.opacity)
        values = np.concatenate([self.mean, self.scale, self.rotation, self.color, [self.opacity]])
        if not np.all(np.isfinite(values)):
            raise NonFiniteInputError("Gaussian3D has non-finite fields")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError(f"rotation quaternion not unit: |q|={np.linalg.norm(self.rotation)}")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be strictly positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must lie in (0, 1), got {self.opacity}")


@dataclass
class Scene:
    """Ordered Gaussian cloud stored as parallel arrays.

    Row order is the canonical Gaussian index used to break ties in
    sorting and pruning.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)

    @classmethod
    def empty(cls) -> Scene:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> Scene:
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.scales[i], self.rotations[i], self.opacities[i], self.colors[i])

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    def subset(self, keep) -> Scene:
        """Scene restricted to ``keep`` (bool mask or sorted index array), order preserved."""
        return Scene(self.means[keep], self.scales[keep], self.rotations[keep], self.opacities[keep], self.colors[keep])

    def copy(self) -> Scene:
        return self.subset(slice(None))

    def validate(self) -> None:
        for i in range(len(self)):
            self[i]


@dataclass
class CameraModel:
    world_to_camera: np.ndarray  # 3x4 [R | t]
    fx: float
    fy: float
    width: int
    height: int
    tile_size: int = 16
    z_near: float = 0.2

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(3, 4)
        self.fx, self.fy, self.z_near = float(self.fx), float(self.fy), float(self.z_near)
        self.width, self.height, self.tile_size = int(self.width), int(self.height), int(self.tile_size)
        if not np.all(np.isfinite(self.world_to_camera)) or not all(
            math.isfinite(v) for v in (self.fx, self.fy, self.z_near)
        ):
            raise NonFiniteInputError("camera has non-finite parameters")
        if min(self.width, self.height, self.tile_size) <= 0 or min(self.fx, self.fy, self.z_near) <= 0:
            raise ValueError("width, height, tile_size, fx, fy and z_near must be positive")
        rot = self.rotation
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            raise ValueError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0

    @classmethod
    def looking_down_z(cls, fx, fy, width, height, **kw) -> CameraModel:
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), fx, fy, width, height, **kw)


@dataclass(frozen=True)
class Conic2D:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0 and self.a * self.c - self.b * self.b > 0):
            raise ValueError(f"conic is not positive definite: {self}")

    def q(self, xd, yd):
        return self.a * xd * xd + 2.0 * self.b * xd * yd + self.c * yd * yd


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray  # (Sxx, Sxy, Syy)
    conic: Conic2D
    depth: float
    opacity: float
    color: np.ndarray = field(default_factory=lambda: np.ones(3))
    threshold_t: float = float("nan")

    @classmethod
    def from_cov2d(cls, mean2d, cov2d, opacity, depth=1.0, color=(1.0, 1.0, 1.0)) -> ProjectedGaussian:
        """Build a record straight from a screen-space covariance.

        ``cov2d`` is either a 2x2 matrix or the triple (Sxx, Sxy, Syy); no
        dilation is applied here.
        """
        cov = np.asarray(cov2d, dtype=np.float64)
        if cov.shape == (2, 2):
            cov = np.array([cov[0, 0], cov[0, 1], cov[1, 1]])
        conic = Conic2D(*(float(v) for v in conic_from_cov(*cov)))
        return cls(
            np.asarray(mean2d, dtype=np.float64),
            cov,
            conic,
            float(depth),
            float(opacity),
            np.asarray(color, dtype=np.float64),
            opacity_threshold(opacity),
        )

    @classmethod
    def from_conic(cls, mean2d, a, b, c, opacity, depth=1.0) -> ProjectedGaussian:
        det = a * c - b * b
        pg = cls.from_cov2d(mean2d, (c / det, -b / det, a / det), opacity, depth)
        pg.conic = Conic2D(float(a), float(b), float(c))
        return pg


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    # Coordinate of the tangent point along the other axis, e.g. the y of
    # the leftmost point of the ellipse.
    y_at_x_min: float = float("nan")
    y_at_x_max: float = float("nan")
    x_at_y_min: float = float("nan")
    x_at_y_max: float = float("nan")

    def tangent_points(self):
        return [
            (self.x_min, self.y_at_x_min),
            (self.x_max, self.y_at_x_max),
            (self.x_at_y_min, self.y_min),
            (self.x_at_y_max, self.y_max),
        ]


def opacity_threshold(opacity: float) -> float:
    """Quadratic-form level at which alpha falls to 1/255."""
    if not 0.0 < opacity <= 1.0:
        raise ValueError(f"opacity must lie in (0, 1], got {opacity}")
    return 2.0 * math.log(255.0 * opacity)


def conic_from_cov(sxx, sxy, syy):
    det = sxx * syy - sxy * sxy
    if not det > 0:
        raise ValueError("2D covariance is not invertible")
    return syy / det, -sxy / det, sxx / det


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def covariance_3d(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """R S S^T R^T for (N, 3) scales and (N, 4) quaternions."""
    m = quat_to_rotmat(rotations) * np.asarray(scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class ProjectedBatch:
    """Struct-of-arrays view of a projected scene; ``valid`` marks survivors."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) Sxx, Sxy, Syy
    conic: np.ndarray  # (N, 3) a, b, c
    depth: np.ndarray  # (N,)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    threshold: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool

    def __len__(self):
        return len(self.depth)

    def record(self, i) -> ProjectedGaussian | None:
        if not self.valid[i]:
            return None
        return ProjectedGaussian(
            self.mean2d[i].copy(),
            self.cov2d[i].copy(),
            Conic2D(*self.conic[i]),
            float(self.depth[i]),
            float(self.opacity[i]),
            self.color[i].copy(),
            float(self.threshold[i]),
        )

    @classmethod
    def from_arrays(cls, mean2d, cov2d, opacity, depth, color) -> ProjectedBatch:
        """Batch from screen-space parameters, culling as projection would."""
        mean2d = np.ascontiguousarray(mean2d, dtype=np.float64).reshape(-1, 2)
        cov2d = np.ascontiguousarray(cov2d, dtype=np.float64).reshape(-1, 3)
        opacity = np.ascontiguousarray(opacity, dtype=np.float64)
        det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
        safe = np.where(det > 0, det, 1.0)
        conic = np.stack([cov2d[:, 2] / safe, -cov2d[:, 1] / safe, cov2d[:, 0] / safe], axis=1)
        with np.errstate(divide="ignore"):
            threshold = 2.0 * np.log(255.0 * opacity)
        valid = (det > 0) & (threshold > 0) & np.all(np.isfinite(conic), axis=1)
        return cls(
            mean2d,
            cov2d,
            conic,
            np.ascontiguousarray(depth, dtype=np.float64),
            opacity,
            np.ascontiguousarray(color, dtype=np.float64).reshape(-1, 3),
            threshold,
            valid,
        )


def project_scene(scene: Scene, cam: CameraModel) -> ProjectedBatch:
    """Vectorised EWA projection of every Gaussian in ``scene``."""
    for arr in (scene.means, scene.scales, scene.rotations, scene.opacities, scene.colors):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError("scene contains non-finite values")
    n = len(scene)
    W = cam.rotation
    p = scene.means @ W.T + cam.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    in_front = z >= cam.z_near
    zs = np.where(in_front, z, 1.0)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / (zs * zs)
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / (zs * zs)
    T = J @ W
    cov = T @ covariance_3d(scene.scales, scene.rotations) @ np.swapaxes(T, 1, 2)
    cov2d = np.stack(
        [cov[:, 0, 0] + COV2D_DILATION, cov[:, 0, 1], cov[:, 1, 1] + COV2D_DILATION], axis=1
    )
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    batch = ProjectedBatch.from_arrays(mean2d, cov2d, scene.opacities, z, scene.colors)
    batch.valid &= in_front
    return batch


def project(g: Gaussian3D, cam: CameraModel) -> ProjectedGaussian | None:
    """Project one Gaussian; ``None`` means culled (behind the near plane,
    too transparent to ever reach alpha 1/255, or singular footprint)."""
    batch = project_scene(Scene.from_gaussians([g]), cam)
    return batch.record(0)


def solve_extent_given_x(conic: Conic2D, t: float, x_d: float) -> tuple[float, ...]:
    """Centered y offsets where the vertical line x = x_d meets q = t (ascending)."""
    a, b, c = conic.a, conic.b, conic.c
    disc = (b * b - a * c) * x_d * x_d + t * c
    if disc < 0:
        if disc > -1e-12 * t * c:
            return (-b * x_d / c,)
        return ()
    if disc == 0:
        return (-b * x_d / c,)
    r = math.sqrt(disc)
    return ((-b * x_d - r) / c, (-b * x_d + r) / c)


def solve_extent_given_y(conic: Conic2D, t: float, y_d: float) -> tuple[float, ...]:
    return solve_extent_given_x(Conic2D(conic.c, conic.b, conic.a), t, y_d)


def _axis_extremes(a, b, c, t):
    """Extremes in y of the centered ellipse a x^2 + 2b xy + c y^2 = t.

    Returns (y_lo, x_at_y_lo, y_hi, x_at_y_hi). The stationary abscissae of
    the solved branch are +-sqrt(-b^2 t / ((b^2 - ac) a)); both signs and
    both branches are tried and the extreme pair kept.
    """
    g = b * b - a * c
    x_arg = math.sqrt(-b * b * t / (g * a))
    lo = (math.inf, 0.0)
    hi = (-math.inf, 0.0)
    for xs in (x_arg, -x_arg):
        r = math.sqrt(max(g * xs * xs + t * c, 0.0))
        for y in ((-b * xs - r) / c, (-b * xs + r) / c):
            if y < lo[0]:
                lo = (y, xs)
            if y > hi[0]:
                hi = (y, xs)
    return lo[0], lo[1], hi[0], hi[1]


def snug_bbox(pg: ProjectedGaussian) -> BBox2D:
    """Tight axis-aligned box of the ellipse q = t around ``pg.mean2d``."""
    a, b, c, t = pg.conic.a, pg.conic.b, pg.conic.c, pg.threshold_t
    mx, my = float(pg.mean2d[0]), float(pg.mean2d[1])
    y_lo, x_at_lo, y_hi, x_at_hi = _axis_extremes(a, b, c, t)
    x_lo, y_at_xlo, x_hi, y_at_xhi = _axis_extremes(c, b, a, t)
    return BBox2D(
        mx + x_lo,
        mx + x_hi,
        my + y_lo,
        my + y_hi,
        y_at_x_min=my + y_at_xlo,
        y_at_x_max=my + y_at_xhi,
        x_at_y_min=mx + x_at_lo,
        x_at_y_max=mx + x_at_hi,
    )


def max_eigenvalue(sxx: float, sxy: float, syy: float) -> float:
    mid = 0.5 * (sxx + syy)
    return mid + math.sqrt(max(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))


def baseline_radius(pg: ProjectedGaussian) -> int:
    """Conservative 3-sigma pixel radius from the larger covariance eigenvalue."""
    return int(math.ceil(3.0 * math.sqrt(max_eigenvalue(*pg.cov2d))))
