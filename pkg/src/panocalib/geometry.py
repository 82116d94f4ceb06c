"""Equirectangular conventions, core data types and back-projection.

Pixel (u, v) has its center at longitude ``phi = 2*pi*(u + 0.5)/W - pi`` and
colatitude ``psi = pi*(v + 0.5)/H`` measured from the +z pole, so row 0 sits
next to the zenith and the equator falls at ``v = H/2 - 0.5``. The bearing is
``(sin psi cos phi, sin psi sin phi, cos psi)``.

A :class:`Pose` ``(R, t)`` places a camera in its parent frame:
``p_parent = R @ p_cam + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class GeometryError(ValueError):
    """Input outside the domain of a geometric operation."""


class EmptyCloudError(GeometryError):
    """A depth map or cloud with no valid samples."""


@dataclass
class Panorama:
    """Equirectangular RGB image, values in [0, 1], shape (H, 2H, 3).

    ``truth`` optionally carries the radial depth of the geometry the image
    depicts. Synthesis operators propagate it so oracle predictors can answer
    for derived images; real images leave it ``None``.
    """

    rgb: np.ndarray
    truth: "DepthMap | None" = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise GeometryError(f"expected (H, W, 3) rgb, got {self.rgb.shape}")
        h, w = self.rgb.shape[:2]
        if w != 2 * h:
            raise GeometryError(f"panorama width must be 2*height, got {w}x{h}")
        if not np.all(np.isfinite(self.rgb)):
            raise GeometryError("non-finite color values")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise GeometryError("color values outside [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def gray(self) -> np.ndarray:
        return self.rgb @ np.array([0.299, 0.587, 0.114])


@dataclass
class DepthMap:
    """Radial depth in meters with a validity mask. Invalid entries hold NaN."""

    depth: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise GeometryError(f"expected (H, W) depth, got {depth.shape}")
        valid = np.isfinite(depth) & (depth > 0)
        if self.valid is not None:
            valid &= np.asarray(self.valid, dtype=bool)
        depth[~valid] = np.nan
        self.depth = depth
        self.valid = valid

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def mean(self) -> float:
        """Pixel-wise average over valid pixels (NaN when none are valid)."""
        if not self.valid.any():
            return float("nan")
        return float(self.depth[self.valid].mean())

    def filled(self, value: float = 0.0) -> np.ndarray:
        return np.where(self.valid, self.depth, value)

    def scaled(self, s: float) -> "DepthMap":
        return DepthMap(self.depth * s, self.valid)


@dataclass(frozen=True)
class SphereDir:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        n = np.sqrt(self.x**2 + self.y**2 + self.z**2)
        if abs(n - 1.0) > 1e-9:
            raise GeometryError(f"bearing must be a unit vector, norm={n}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    source_pixel: np.ndarray | None = None
    normal_valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise GeometryError("normals and points differ in length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise GeometryError("rotation is not a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Express parent-frame points in this camera's frame."""
        return (np.asarray(points) - self.translation) @ self.rotation

    def to_json(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(np.array(obj["rotation"], dtype=np.float64).reshape(3, 3), obj["translation"])


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def colatitude(v, height: int):
    return np.pi * (np.asarray(v, dtype=np.float64) + 0.5) / height


def longitude(u, width: int):
    return 2.0 * np.pi * (np.asarray(u, dtype=np.float64) + 0.5) / width - np.pi


def angles_to_dirs(phi, psi) -> np.ndarray:
    sp = np.sin(psi)
    return np.stack([sp * np.cos(phi), sp * np.sin(phi), np.cos(psi) * np.ones_like(phi)], axis=-1)


def pixel_to_dir(u: float, v: float, width: int, height: int) -> SphereDir:
    if not (0 <= u < width and 0 <= v < height):
        raise GeometryError(f"pixel ({u}, {v}) outside {width}x{height}")
    d = angles_to_dirs(longitude(u, width), colatitude(v, height))
    d = d / np.linalg.norm(d)
    return SphereDir(float(d[0]), float(d[1]), float(d[2]))


def pixels_to_dirs(u, v, width: int, height: int) -> np.ndarray:
    """Vectorized :func:`pixel_to_dir` without range checks."""
    return angles_to_dirs(longitude(u, width), colatitude(v, height))


def dirs_to_pixels(d: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (u, v) for bearings (any nonzero length), shape (..., 3).

    ``u`` wraps into [0, W). ``v`` is clamped to [0, H - 1] so the pole
    directions land on the first/last row centers; at an exact pole the
    longitude is undefined and ``u`` is set to 0.
    """
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1)
    if np.any(n == 0):
        raise GeometryError("zero-length bearing")
    phi = np.arctan2(d[..., 1], d[..., 0])
    psi = np.arccos(np.clip(d[..., 2] / n, -1.0, 1.0))
    u = np.mod((phi + np.pi) * width / (2.0 * np.pi) - 0.5, width)
    u = np.where((u >= width) | ((d[..., 0] == 0) & (d[..., 1] == 0)), 0.0, u)
    v = np.clip(psi * height / np.pi - 0.5, 0.0, height - 1.0)
    return u, v


def dir_to_pixel(d: SphereDir | np.ndarray, width: int, height: int) -> tuple[float, float]:
    arr = d.as_array() if isinstance(d, SphereDir) else np.asarray(d, dtype=np.float64)
    u, v = dirs_to_pixels(arr, width, height)
    return float(u), float(v)


@lru_cache(maxsize=16)
def _sphere_grid(height: int, width: int) -> np.ndarray:
    vv, uu = np.mgrid[0:height, 0:width]
    grid = pixels_to_dirs(uu, vv, width, height)
    grid /= np.linalg.norm(grid, axis=-1, keepdims=True)
    grid.setflags(write=False)
    return grid


def sphere_grid(height: int, width: int) -> np.ndarray:
    """Unit bearings of every pixel center, shape (H, W, 3). Read-only, cached."""
    return _sphere_grid(int(height), int(width))


def backproject(depth: DepthMap) -> PointCloud:
    """Lift valid pixels to camera-frame points ``depth * bearing``."""
    if not depth.valid.any():
        raise EmptyCloudError("depth map has no valid pixels")
    grid = sphere_grid(depth.height, depth.width)
    vs, us = np.nonzero(depth.valid)
    pts = grid[vs, us] * depth.depth[vs, us, None]
    return PointCloud(pts, source_pixel=np.stack([us, vs], axis=1))
