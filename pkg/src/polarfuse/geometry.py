"""Boxes, point sets, frame transforms and polar grouping indices.

Points are carried as ``(n, 4)`` float32 arrays of ``x, y, z, intensity`` in
the LiDAR sensor frame (x forward, z up).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
CLASSES = ("Pedestrian", "Cyclist", "Car")


class DegenerateCenter(ValueError):
    """Object center sits on the sensor origin so its direction is undefined."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle into ``[0, 2pi)``."""
    out = math.fmod(theta, TWO_PI)
    if out < 0.0:
        out += TWO_PI
    # fmod of a tiny negative can round back up to 2pi
    if out >= TWO_PI:
        out = 0.0
    return out


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float32)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"points must be (n, 4), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Box3D:
    center: tuple
    dims: tuple  # (length, width, height)
    yaw: float
    class_label: str = "Car"

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        dims = tuple(float(d) for d in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("center and dims need three components")
        if not all(math.isfinite(c) for c in center):
            raise ValueError(f"non-finite box center {center}")
        if not all(d > 0 for d in dims):
            raise ValueError(f"box dims must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        l, w = self.dims[0] / 2.0, self.dims[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])


@dataclass
class ObjectPoints:
    box: Box3D
    points: np.ndarray
    source: tuple = ("", 0)

    def __post_init__(self):
        self.points = as_points(self.points)


@dataclass
class Scene:
    frame_id: str
    objects: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))
    added: Optional[list] = None  # one (m, 4) array per object once enhanced

    def __post_init__(self):
        self.background = as_points(self.background)
        if self.added is not None and len(self.added) not in (0, len(self.objects)):
            raise ValueError("added sets must be empty or match the objects one to one")

    @property
    def boxes(self) -> list:
        return [o.box for o in self.objects]

    def raw_points(self) -> np.ndarray:
        parts = [o.points for o in self.objects] + [self.background]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 4), np.float32)

    def added_points(self) -> np.ndarray:
        if not self.added:
            return np.zeros((0, 4), np.float32)
        return np.concatenate([as_points(a) for a in self.added], axis=0)

    def all_points(self) -> np.ndarray:
        return np.concatenate([self.raw_points(), self.added_points()], axis=0)


@dataclass(frozen=True, order=True)
class PolarIndex:
    class_label: str
    dir_bin: int
    rot_bin: int


def direction_angle(box: Box3D) -> float:
    """Azimuth of the box center seen from the sensor, in ``[0, 2pi)``."""
    x, y = box.center[0], box.center[1]
    if x == 0.0 and y == 0.0:
        raise DegenerateCenter(f"box center {box.center} lies on the sensor axis")
    return normalize_angle(math.atan2(y, x))


def rotation_angle(box: Box3D) -> float:
    return normalize_angle(box.yaw)


def angle_bin(theta: float, n: int) -> int:
    if n < 1:
        raise ValueError("bin count must be >= 1")
    return min(int(math.floor(theta * n / TWO_PI)), n - 1)


def group_index(alpha: float, beta: float, class_label: str, n: int) -> PolarIndex:
    """Bin (direction, rotation) into an ``n x n`` grid of equal angular sectors."""
    return PolarIndex(class_label, angle_bin(alpha, n), angle_bin(beta, n))


def polar_index_of(box: Box3D, n: int) -> PolarIndex:
    return group_index(direction_angle(box), rotation_angle(box), box.class_label, n)


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_local(points, box: Box3D) -> np.ndarray:
    """Express points in the box frame (origin at center, +x along heading).

    Accepts ``(n, 3)`` or ``(n, 4)``; extra columns pass through. Returns float64.
    """
    pts = np.array(points, dtype=np.float64, ndmin=2)
    xyz = pts[:, :3] - np.asarray(box.center)
    # row-vector form: p @ R is R^T p, the inverse rotation
    pts[:, :3] = xyz @ _rot_z(box.yaw)
    return pts


def to_global(points, box: Box3D) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, ndmin=2)
    pts[:, :3] = pts[:, :3] @ _rot_z(box.yaw).T + np.asarray(box.center)
    return pts


def points_in_box(points, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the margin-expanded oriented box (inclusive)."""
    pts = np.asarray(points)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    local = to_local(pts[:, :3], box)
    half = np.asarray(box.dims) / 2.0 + margin
    return np.all(np.abs(local) <= half, axis=1)


def rotate_boxes_about_sensor(boxes: Sequence[Box3D], theta: float) -> list:
    """Rotate boxes (center and heading) about the sensor z axis."""
    rot = _rot_z(theta)
    out = []
    for b in boxes:
        c = rot @ np.asarray(b.center)
        out.append(Box3D(tuple(c), b.dims, b.yaw + theta, b.class_label))
    return out
