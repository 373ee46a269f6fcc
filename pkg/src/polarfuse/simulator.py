"""Synthetic LiDAR scenes by ray casting against box-shaped objects and a ground plane.

Point density falls with range and only sensor-facing surfaces are hit, so
far objects are sparse and one-sided in the same way real scans are.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .bev import BevConfig
from .geometry import Box3D
from .kitti import crop_objects

TEMPLATES = {
    # (mean l, w, h), (std l, w, h), intensity
    "Car": ((4.0, 1.7, 1.55), (0.25, 0.08, 0.08), 0.6),
    "Pedestrian": ((0.8, 0.6, 1.75), (0.08, 0.06, 0.08), 0.3),
    "Cyclist": ((1.76, 0.6, 1.7), (0.12, 0.06, 0.08), 0.45),
}


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_train: int = 200
    n_val: int = 50
    objects_min: int = 3
    objects_max: int = 7
    class_weights: tuple = (("Car", 0.5), ("Pedestrian", 0.25), ("Cyclist", 0.25))
    clutter_max: int = 3
    azimuth_res: float = 0.007  # radians between columns
    n_beams: int = 32
    elev_range: tuple = (-0.42, 0.035)
    fov: float = 0.9  # half-angle of the simulated azimuth sweep
    min_range: float = 5.0
    max_range: float = 36.0
    object_fov: float = 0.7
    noise_sigma: float = 0.02
    sensor_height: float = 1.73
    yaw_jitter: float = 0.08
    camera_noise: float = 0.1
    camera_depth_err: float = 0.03  # camera depth sigma as a fraction of range
    margin: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.azimuth_res <= 0 or self.n_beams < 1:
            raise ValueError("angular resolution must be positive")
        if not 0 < self.min_range < self.max_range:
            raise ValueError("ranges must be positive and ordered")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("bad object count range")
        object.__setattr__(self, "class_weights", tuple(tuple(cw) for cw in self.class_weights))

    def train_indices(self) -> range:
        return range(0, self.n_train)

    def val_indices(self) -> range:
        return range(self.n_train, self.n_train + self.n_val)


def frame_name(index: int) -> str:
    return f"{index:06d}"


def _scene_rng(cfg: SimConfig, index: int, stream: str = "scene") -> np.random.Generator:
    return np.random.default_rng([cfg.seed & (2**64 - 1), index, zlib.crc32(stream.encode())])


def ray_directions(cfg: SimConfig) -> np.ndarray:
    n_az = int(round(2 * cfg.fov / cfg.azimuth_res)) + 1
    az = -cfg.fov + cfg.azimuth_res * np.arange(n_az)
    el = np.linspace(cfg.elev_range[0], cfg.elev_range[1], cfg.n_beams)
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def ray_box_hits(dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry distance of rays from the origin into ``box`` (inf where missed)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    origin = rot @ (-np.asarray(box.center))
    d = dirs @ rot.T
    half = np.asarray(box.dims) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tnear = np.max(np.minimum(t1, t2), axis=1)
    tfar = np.min(np.maximum(t1, t2), axis=1)
    hit = (tnear <= tfar) & (tnear > 0)
    return np.where(hit, tnear, np.inf)


def cast(dirs: np.ndarray, boxes, cfg: SimConfig) -> tuple:
    """First hit per ray. Returns (distance, hit id) with -1 ground, -2 none, k box k."""
    best = np.full(len(dirs), np.inf)
    who = np.full(len(dirs), -2, dtype=np.int64)
    with np.errstate(divide="ignore"):
        tg = np.where(dirs[:, 2] < 0, -cfg.sensor_height / dirs[:, 2], np.inf)
    ground = tg < best
    best[ground], who[ground] = tg[ground], -1
    for k, box in enumerate(boxes):
        t = ray_box_hits(dirs, box)
        closer = t < best
        best[closer], who[closer] = t[closer], k
    return best, who


def _sample_box(rng, cfg: SimConfig, label: str) -> Box3D:
    mean, std, _ = TEMPLATES[label]
    dims = tuple(max(m + s * rng.standard_normal(), 0.3 * m) for m, s in zip(mean, std))
    dist = rng.uniform(cfg.min_range, cfg.max_range)
    az = rng.uniform(-cfg.object_fov, cfg.object_fov)
    yaw = rng.integers(4) * (math.pi / 2) + cfg.yaw_jitter * rng.standard_normal()
    z = -cfg.sensor_height + dims[2] / 2.0
    return Box3D((dist * math.cos(az), dist * math.sin(az), z), dims, yaw, label)


def _clutter_box(rng, cfg: SimConfig) -> Box3D:
    dims = (rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.2), rng.uniform(0.6, 2.2))
    r = rng.uniform(cfg.min_range, cfg.max_range)
    az = rng.uniform(-cfg.object_fov, cfg.object_fov)
    return Box3D((r * math.cos(az), r * math.sin(az), -cfg.sensor_height + dims[2] / 2), dims,
                 rng.uniform(0, 2 * math.pi), "Clutter")


def _separated(box: Box3D, others, gap: float = 0.5) -> bool:
    for o in others:
        reach = 0.5 * math.hypot(box.dims[0], box.dims[1]) + 0.5 * math.hypot(o.dims[0], o.dims[1]) + gap
        if math.hypot(box.center[0] - o.center[0], box.center[1] - o.center[1]) < reach:
            return False
    return True


def place_boxes(rng, cfg: SimConfig, n: int, make, placed=(), retries: int = 200) -> list:
    out = list(placed)
    for _ in range(n):
        for _attempt in range(retries):
            box = make()
            if _separated(box, out):
                out.append(box)
                break
        else:
            raise PlacementFailure(f"could not place object {len(out) + 1} after {retries} tries")
    return out[len(placed):]


def generate_scene(cfg: SimConfig, index: int) -> tuple:
    """Deterministic (Scene, ground-truth boxes) for ``index`` under ``cfg.seed``."""
    rng = _scene_rng(cfg, index)
    labels = [c for c, _ in cfg.class_weights]
    probs = np.array([w for _, w in cfg.class_weights], dtype=np.float64)
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    picks = [labels[k] for k in rng.choice(len(labels), size=n_obj, p=probs / probs.sum())] if n_obj else []
    boxes = []
    for label in picks:
        boxes += place_boxes(rng, cfg, 1, lambda: _sample_box(rng, cfg, label), boxes)
    n_clutter = int(rng.integers(0, cfg.clutter_max + 1)) if cfg.clutter_max > 0 else 0
    clutter = place_boxes(rng, cfg, n_clutter, lambda: _clutter_box(rng, cfg), boxes)

    dirs = ray_directions(cfg)
    everything = boxes + clutter
    dist, who = cast(dirs, everything, cfg)
    hit = (who >= -1) & (dist <= cfg.max_range * 1.6)
    pts = dirs[hit] * dist[hit, None]
    pts += cfg.noise_sigma * rng.standard_normal(pts.shape)
    inten = np.empty(len(pts))
    owner = who[hit]
    inten[owner == -1] = 0.1
    for k, box in enumerate(everything):
        base = TEMPLATES[box.class_label][2] if box.class_label in TEMPLATES else 0.5
        inten[owner == k] = base
    inten = np.clip(inten + 0.05 * rng.standard_normal(len(inten)), 0.0, 1.0)
    points = np.hstack([pts, inten[:, None]]).astype(np.float32)
    scene = crop_objects(points, boxes, cfg.margin, frame_name(index))
    return scene, boxes


def render_camera_grid(boxes, bev: BevConfig, cfg: SimConfig, index: int) -> np.ndarray:
    """Camera-derived BEV grid: silhouette channel plus one channel per class.

    Silhouettes are displaced along the viewing ray by a range-proportional
    depth error, then Gaussian noise is added to every cell.
    """
    rng = _scene_rng(cfg, index, "camera")
    grid = np.zeros((bev.H, bev.W, bev.c_c), dtype=np.float64)
    xs = bev.x_range[0] + (np.arange(bev.H) + 0.5) * bev.cell
    ys = bev.y_range[0] + (np.arange(bev.W) + 0.5) * bev.cell
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    for box in boxes:
        shift = 1.0 + cfg.camera_depth_err * rng.standard_normal()
        cx, cy = box.center[0] * shift, box.center[1] * shift
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        lx = (X - cx) * c + (Y - cy) * s
        ly = -(X - cx) * s + (Y - cy) * c
        inside = (np.abs(lx) <= box.dims[0] / 2) & (np.abs(ly) <= box.dims[1] / 2)
        if bev.in_range(cx, cy):
            inside[bev.cell_of(cx, cy)] = True
        grid[inside, 0] = 1.0
        if box.class_label in bev.classes and 1 + bev.classes.index(box.class_label) < bev.c_c:
            grid[inside, 1 + bev.classes.index(box.class_label)] = 1.0
    grid += cfg.camera_noise * rng.standard_normal(grid.shape)
    return grid.astype(np.float32)


def generate_split(cfg: SimConfig, split: str = "train") -> list:
    idx = cfg.train_indices() if split == "train" else cfg.val_indices()
    return [generate_scene(cfg, i) for i in idx]
