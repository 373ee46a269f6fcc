"""KITTI-format velodyne / label / calib readers and writers, object cropping, PLY export."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Box3D, ObjectPoints, Scene, as_points, points_in_box

log = logging.getLogger(__name__)

ADDED_COLOR = (255, 64, 255)
RAW_COLOR = (0, 0, 0)


class KittiFormatError(ValueError):
    pass


class TruncatedFile(KittiFormatError):
    pass


class NonFiniteValue(KittiFormatError):
    pass


class MalformedLine(KittiFormatError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class CalibMatrices:
    tr_velo_to_cam: np.ndarray  # (3, 4)
    r0_rect: np.ndarray  # (3, 3)

    def __post_init__(self):
        tr = np.asarray(self.tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        r0 = np.asarray(self.r0_rect, dtype=np.float64).reshape(3, 3)
        if np.abs(r0.T @ r0 - np.eye(3)).max() >= 1e-3:
            raise KittiFormatError("R0_rect is not orthonormal")
        object.__setattr__(self, "tr_velo_to_cam", tr)
        object.__setattr__(self, "r0_rect", r0)

    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous map from the LiDAR frame to the rectified camera frame."""
        tr = np.eye(4)
        tr[:3, :] = self.tr_velo_to_cam
        r0 = np.eye(4)
        r0[:3, :3] = self.r0_rect
        return r0 @ tr

    @classmethod
    def identity(cls) -> "CalibMatrices":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3))

    @classmethod
    def standard(cls) -> "CalibMatrices":
        """Axis permutation used by KITTI rigs: cam x = -velo y, cam y = -velo z, cam z = velo x."""
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        return cls(np.hstack([rot, np.zeros((3, 1))]), np.eye(3))


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple
    dims_hwl: tuple
    location_cam: tuple
    rotation_y: float


# -- velodyne ---------------------------------------------------------------

def read_velodyne(data: bytes) -> np.ndarray:
    if len(data) % 16:
        raise TruncatedFile(f"velodyne payload of {len(data)} bytes is not a multiple of 16")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float32)
    if not np.isfinite(pts).all():
        raise NonFiniteValue("velodyne payload contains NaN or Inf")
    return pts


def write_velodyne(points) -> bytes:
    return as_points(points).astype("<f4").tobytes()


def clamp_intensity(points: np.ndarray) -> tuple:
    """Clamp intensity into [0, 1]; returns (points, number clamped)."""
    inten = points[:, 3]
    bad = (inten < 0.0) | (inten > 1.0)
    n = int(bad.sum())
    if n:
        points = points.copy()
        points[:, 3] = np.clip(inten, 0.0, 1.0)
    return points, n


# -- calib ------------------------------------------------------------------

def read_calib(text: str) -> CalibMatrices:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise MalformedLine(lineno, "expected 'KEY: values'")
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise MalformedLine(lineno, str(exc)) from None
    for key, n in (("Tr_velo_to_cam", 12), ("R0_rect", 9)):
        if key not in values:
            raise KittiFormatError(f"calib missing {key}")
        if len(values[key]) != n:
            raise KittiFormatError(f"{key} needs {n} values, got {len(values[key])}")
    return CalibMatrices(np.array(values["Tr_velo_to_cam"]), np.array(values["R0_rect"]))


def write_calib(calib: CalibMatrices) -> str:
    def fmt(a):
        return " ".join(repr(float(v)) for v in np.ravel(a))

    return f"Tr_velo_to_cam: {fmt(calib.tr_velo_to_cam)}\nR0_rect: {fmt(calib.r0_rect)}\n"


# -- labels -----------------------------------------------------------------

def parse_label_line(line: str, lineno: int = 1) -> KittiLabel:
    fields = line.split()
    if len(fields) != 15:
        raise MalformedLine(lineno, f"expected 15 fields, got {len(fields)}")
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise MalformedLine(lineno, str(exc)) from None
    return KittiLabel(
        type=fields[0],
        truncated=nums[0],
        occluded=int(nums[1]),
        alpha=nums[2],
        bbox2d=tuple(nums[3:7]),
        dims_hwl=tuple(nums[7:10]),
        location_cam=tuple(nums[10:13]),
        rotation_y=nums[13],
    )


def label_to_box(label: KittiLabel, calib: CalibMatrices) -> Box3D:
    h, w, l = label.dims_hwl
    # camera y points down and location is the bottom-face center
    loc = np.asarray(label.location_cam, dtype=np.float64) - np.array([0.0, h / 2.0, 0.0])
    rect_to_velo = np.linalg.inv(calib.velo_to_rect())
    center = (rect_to_velo @ np.append(loc, 1.0))[:3]
    ry = label.rotation_y
    heading = rect_to_velo[:3, :3] @ np.array([math.cos(ry), 0.0, -math.sin(ry)])
    yaw = math.atan2(heading[1], heading[0])
    return Box3D(tuple(center), (l, w, h), yaw, label.type)


def box_to_label(box: Box3D, calib: CalibMatrices) -> KittiLabel:
    l, w, h = box.dims
    v2r = calib.velo_to_rect()
    center = (v2r @ np.append(np.asarray(box.center), 1.0))[:3]
    loc = center + np.array([0.0, h / 2.0, 0.0])
    heading = v2r[:3, :3] @ np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    ry = math.atan2(-heading[2], heading[0])
    alpha = ry - math.atan2(loc[0], loc[2])
    return KittiLabel(box.class_label, 0.0, 0, alpha, (0.0, 0.0, 0.0, 0.0), (h, w, l), tuple(loc), ry)


def read_labels(text: str, calib: CalibMatrices) -> list:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        label = parse_label_line(line, lineno)
        if label.type == "DontCare":
            continue
        if min(label.dims_hwl) <= 0:
            raise MalformedLine(lineno, "non-positive dimensions")
        boxes.append(label_to_box(label, calib))
    return boxes


def write_labels(boxes: Iterable[Box3D], calib: CalibMatrices) -> str:
    lines = []
    for box in boxes:
        lab = box_to_label(box, calib)
        nums = [lab.truncated, lab.occluded, lab.alpha, *lab.bbox2d, *lab.dims_hwl,
                *lab.location_cam, lab.rotation_y]
        lines.append(" ".join([lab.type] + [repr(float(v)) for v in nums]))
    return "".join(line + "\n" for line in lines)


# -- scenes -----------------------------------------------------------------

def crop_objects(points, boxes: Sequence[Box3D], margin: float = 0.25,
                 frame_id: str = "") -> Scene:
    """Split points into per-box sets (first containing box wins) and background."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pts = as_points(points)
    free = np.ones(len(pts), dtype=bool)
    objects = []
    for i, box in enumerate(boxes):
        inside = free & points_in_box(pts, box, margin)
        objects.append(ObjectPoints(box, pts[inside], (frame_id, i)))
        free &= ~inside
    return Scene(frame_id, objects, pts[free])


def write_ply(points, colors=None) -> str:
    pts = np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, pts.shape[-1]) if pts.size else np.zeros((0, 3))
    n = len(pts)
    if colors is None:
        colors = np.zeros((n, 3), dtype=np.int64)
    colors = np.asarray(colors, dtype=np.int64).reshape(n, 3)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(pts, colors)]
    return "\n".join(header + body) + "\n"


def scene_ply(scene: Scene) -> str:
    """PLY of an (optionally enhanced) scene: raw points black, added points magenta."""
    raw = scene.raw_points()
    added = scene.added_points()
    colors = np.vstack([np.tile(RAW_COLOR, (len(raw), 1)), np.tile(ADDED_COLOR, (len(added), 1))])
    return write_ply(np.vstack([raw[:, :3], added[:, :3]]), colors)


# -- split directories ------------------------------------------------------

SPLIT_MARKER = "SPLIT"


def split_tag(root) -> Optional[str]:
    marker = Path(root) / SPLIT_MARKER
    if marker.exists():
        return marker.read_text().strip().split()[0]
    return None


def frame_ids(root) -> list:
    return sorted(p.stem for p in (Path(root) / "velodyne").glob("*.bin"))


def write_frame(root, frame_id: str, points, boxes, calib: CalibMatrices) -> None:
    root = Path(root)
    for sub in ("velodyne", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "velodyne" / f"{frame_id}.bin").write_bytes(write_velodyne(points))
    (root / "label_2" / f"{frame_id}.txt").write_text(write_labels(boxes, calib))
    (root / "calib" / f"{frame_id}.txt").write_text(write_calib(calib))


def load_frame(root, frame_id: str, margin: float = 0.25) -> Scene:
    root = Path(root)
    pts = read_velodyne((root / "velodyne" / f"{frame_id}.bin").read_bytes())
    pts, n = clamp_intensity(pts)
    if n:
        log.warning("frame %s: clamped %d intensities into [0, 1]", frame_id, n)
    calib = read_calib((root / "calib" / f"{frame_id}.txt").read_text())
    boxes = read_labels((root / "label_2" / f"{frame_id}.txt").read_text(), calib)
    return crop_objects(pts, boxes, margin, frame_id)
