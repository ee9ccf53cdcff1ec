"""Pinhole projection, silhouette rasterization and Grabcut trimaps.

Masks are ``(height, width)`` boolean arrays; trimaps are ``uint8`` arrays
holding the four seed classes below.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import rasterize_capsules
from ._validation import check_mask
from .geometry import Centerline, Pose, transform_point

__all__ = [
    "CameraIntrinsics",
    "SURE_BG",
    "LIKELY_BG",
    "LIKELY_FG",
    "SURE_FG",
    "project_point",
    "project_points",
    "rasterize_tube",
    "erode",
    "dilate",
    "build_trimap",
]

SURE_BG, LIKELY_BG, LIKELY_FG, SURE_FG = 0, 1, 2, 3

MIN_DEPTH = 1e-6
SURE_FG_KERNEL = 7
LIKELY_BG_KERNEL = 24


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
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self):
        return (int(self.height), int(self.width))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def project_points(T: Pose, k: CameraIntrinsics, p_robot):
    """Vectorised projection; returns ``(u, v, depth, in_front)`` arrays."""
    pc = transform_point(T, np.atleast_2d(p_robot))
    z = pc[:, 2]
    in_front = z > MIN_DEPTH
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, k.fx * pc[:, 0] / safe_z + k.cx, np.nan)
    v = np.where(in_front, k.fy * pc[:, 1] / safe_z + k.cy, np.nan)
    return u, v, z, in_front


def project_point(T: Pose, k: CameraIntrinsics, p_robot):
    """Project one robot-frame point; returns ``(u, v, depth, behind)``.

    ``u`` and ``v`` are NaN when the point is behind the camera.
    """
    u, v, z, in_front = project_points(T, k, np.asarray(p_robot, dtype=float).reshape(1, 3))
    return float(u[0]), float(v[0]), float(z[0]), not bool(in_front[0])


def rasterize_tube(c: Centerline, radius: float, T: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Silhouette of a tube of ``radius`` mm around the centreline.

    Each sample in front of the camera becomes a disk of pixel radius
    ``fx * radius / z``; consecutive visible disks are joined by their convex hull.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    H, W = k.shape
    if len(c) == 0:
        return np.zeros((H, W), bool)
    u, v, z, valid = project_points(T, k, c.points)
    r = np.where(valid, k.fx * radius / np.where(valid, z, 1.0), 0.0)
    return rasterize_capsules(
        np.nan_to_num(u), np.nan_to_num(v), r, valid, H, W
    )


def _box_sum(m: np.ndarray, k: int, anchor: int) -> np.ndarray:
    """Count of set pixels in the k x k window starting ``anchor`` above/left of each pixel."""
    H, W = m.shape
    ii = np.zeros((H + 1, W + 1), np.int64)
    np.cumsum(np.cumsum(m, axis=0, dtype=np.int64), axis=1, out=ii[1:, 1:])
    r0 = np.clip(np.arange(H) - anchor, 0, H)
    r1 = np.clip(np.arange(H) - anchor + k, 0, H)
    c0 = np.clip(np.arange(W) - anchor, 0, W)
    c1 = np.clip(np.arange(W) - anchor + k, 0, W)
    return ii[r1][:, c1] - ii[r0][:, c1] - ii[r1][:, c0] + ii[r0][:, c0]


def _anchor(k: int) -> int:
    # centre for odd k, upper-left of the central 2x2 for even k
    return (k - 1) // 2


def dilate(m, k: int) -> np.ndarray:
    """Binary dilation with a k x k square; pixels outside the image are ignored."""
    m = check_mask(m)
    if k < 1:
        raise ValueError("kernel side must be >= 1")
    if k == 1:
        return m.copy()
    return _box_sum(m, k, _anchor(k)) > 0


def erode(m, k: int) -> np.ndarray:
    """Binary erosion with a k x k square; pixels outside the image count as background."""
    m = check_mask(m)
    if k < 1:
        raise ValueError("kernel side must be >= 1")
    if k == 1:
        return m.copy()
    return _box_sum(m, k, _anchor(k)) == k * k


def build_trimap(omega_p) -> np.ndarray:
    """Four-class Grabcut seeds from a projected silhouette."""
    omega_p = check_mask(omega_p)
    if not omega_p.any():
        raise ValueError("empty projection: no foreground seed for the trimap")
    H, W = omega_p.shape
    trimap = np.full((H, W), SURE_BG, np.uint8)
    # work on the silhouette's bounding box grown by the dilation reach
    rows = np.flatnonzero(omega_p.any(axis=1))
    cols = np.flatnonzero(omega_p.any(axis=0))
    pad = LIKELY_BG_KERNEL
    ys = slice(max(rows[0] - pad, 0), min(rows[-1] + pad + 1, H))
    xs = slice(max(cols[0] - pad, 0), min(cols[-1] + pad + 1, W))
    m = omega_p[ys, xs]
    t = trimap[ys, xs]
    t[dilate(m, LIKELY_BG_KERNEL)] = LIKELY_BG
    t[m] = LIKELY_FG
    t[erode(m, SURE_FG_KERNEL)] = SURE_FG
    return trimap
