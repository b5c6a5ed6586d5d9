"""Rays, pinhole cameras and closest-approach geometry between two rays.

Camera convention is OpenCV-style: +x right, +y down, +z forward in the
camera frame. A pixel index (u, v) refers to the pixel whose centre sits at
image coordinate (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARALLEL_EPS = 1e-12


class GeometryError(ValueError):
    """Invalid camera, ray or pixel input."""


def as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"non-finite vector {v}")
    return v


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = as_vec3(self.origin)
        d = as_vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError(f"ray direction must be unit length, |d| = {np.linalg.norm(d)}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def through(cls, origin, direction) -> "Ray":
        """Build a ray, normalising ``direction``."""
        d = as_vec3(direction)
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("zero direction")
        return cls(as_vec3(origin), d / n)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rotation and camera centre in world coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "CameraPose":
        """Pose at ``eye`` whose +z axis points at ``target``; world ``up`` maps to camera -y."""
        eye = as_vec3(eye)
        z = as_vec3(target) - eye
        z /= np.linalg.norm(z)
        y = -as_vec3(up)
        y = y - (y @ z) * z
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        R = np.stack([x, y, z], axis=1)
        # re-orthonormalise to keep the det check tight
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (..., 3) to pixel indices (..., 2) and camera-frame z."""
        pts = np.asarray(points, dtype=np.float64)
        cam = (pts - self.pose.translation) @ self.pose.rotation
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * cam[..., 0] / z + self.intrinsics.cx - 0.5
            v = self.intrinsics.fy * cam[..., 1] / z + self.intrinsics.cy - 0.5
        return np.stack([u, v], axis=-1), z

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        u, v = pixels[..., 0], pixels[..., 1]
        return (u >= 0) & (u < self.intrinsics.width) & (v >= 0) & (v < self.intrinsics.height)


def generate_rays(intr: CameraIntrinsics, pose: CameraPose, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised back-projection of pixel indices (N, 2) to world rays.

    Returns (origins, directions), both (N, 3) float64 with unit directions.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = px[:, 0], px[:, 1]
    if np.any((u < 0) | (u >= intr.width) | (v < 0) | (v >= intr.height)) or not np.all(np.isfinite(px)):
        raise GeometryError(f"pixel out of bounds for a {intr.width}x{intr.height} image")
    d_cam = np.stack(
        [(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    )
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def generate_ray(intr: CameraIntrinsics, pose: CameraPose, pixel) -> Ray:
    o, d = generate_rays(intr, pose, [pixel])
    return Ray(o[0], d[0])


def point_at(r: Ray, t: float) -> np.ndarray:
    if not np.isfinite(t):
        raise GeometryError("t must be finite")
    return r.origin + t * r.direction


@dataclass(frozen=True)
class ClosestParams:
    m: float
    n: float
    degenerate: bool


def closest_params_batch(o1, d1, o2, d2):
    """Closest-approach distances (m, n) along two families of lines.

    Arrays are (..., 3). Returns (m, n, degenerate). For degenerate (parallel)
    pairs one origin is projected onto the other line: whichever of o1 -> line 2
    and o2 -> line 1 is shorter, so the result does not depend on pair order
    when the lines are merely close to parallel.
    """
    o1, d1, o2, d2 = (np.asarray(x, dtype=np.float64) for x in (o1, d1, o2, d2))
    a = np.sum(d1 * d1, axis=-1)
    b = np.sum(d2 * d2, axis=-1)
    c = np.sum(d1 * d2, axis=-1)
    d = np.sum(d1 * o1, axis=-1)
    e = np.sum(d1 * o2, axis=-1)
    f = np.sum(d2 * o1, axis=-1)
    g = np.sum(d2 * o2, axis=-1)
    den = a * b - c * c
    degenerate = np.abs(den) < PARALLEL_EPS
    safe = np.where(degenerate, 1.0, den)
    m = (b * e + c * f - c * g - b * d) / safe
    n = (c * e + a * f - c * d - a * g) / safe
    if np.any(degenerate):
        n1 = (f - g) / b  # foot of o1 on line 2
        m2 = (e - d) / a  # foot of o2 on line 1
        gap1 = np.linalg.norm(o1 - o2 - n1[..., None] * d2, axis=-1)
        gap2 = np.linalg.norm(o1 - o2 + m2[..., None] * d1, axis=-1)
        first = gap1 <= gap2
        m = np.where(degenerate, np.where(first, 0.0, m2), m)
        n = np.where(degenerate, np.where(first, n1, 0.0), n)
    return m, n, degenerate


def closest_params(r1: Ray, r2: Ray) -> ClosestParams:
    m, n, deg = closest_params_batch(r1.origin, r1.direction, r2.origin, r2.direction)
    return ClosestParams(float(m), float(n), bool(deg))


def ray_min_distance_batch(o1, d1, o2, d2):
    """Minimum distance between paired infinite lines; also returns (m, n, degenerate)."""
    m, n, deg = closest_params_batch(o1, d1, o2, d2)
    gap = np.asarray(o1) - np.asarray(o2) + m[..., None] * np.asarray(d1) - n[..., None] * np.asarray(d2)
    return np.linalg.norm(gap, axis=-1), m, n, deg


def ray_min_distance(r1: Ray, r2: Ray) -> float:
    dist, _, _, _ = ray_min_distance_batch(r1.origin, r1.direction, r2.origin, r2.direction)
    return float(dist)


def triangulate_midpoint(o1, d1, o2, d2) -> np.ndarray:
    """Midpoint of the common perpendicular of paired lines."""
    m, n, _ = closest_params_batch(o1, d1, o2, d2)
    return 0.5 * (np.asarray(o1) + m[..., None] * d1 + np.asarray(o2) + n[..., None] * d2)


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = as_vec3(axis)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
