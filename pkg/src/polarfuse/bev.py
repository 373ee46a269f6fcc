"""Bird's-eye-view grids: pillar encoding, fixed neighbourhood context, detection targets and decoding."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import CLASSES, Box3D

# class -> (length, width, height) used for decoding height-less predictions
CLASS_DIMS = {"Car": (4.0, 1.7, 1.55), "Pedestrian": (0.8, 0.6, 1.75), "Cyclist": (1.76, 0.6, 1.7)}


@dataclass(frozen=True)
class BevConfig:
    x_range: tuple = (0.0, 38.4)
    y_range: tuple = (-19.2, 19.2)
    cell: float = 0.6
    c_l: int = 32
    c_c: int = 4
    classes: tuple = CLASSES
    ground_z: float = -1.73

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("empty BEV range")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"range {hi - lo} is not a whole number of {self.cell} m cells")

    @property
    def H(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def W(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def cell_of(self, x: float, y: float) -> tuple:
        return (int(math.floor((x - self.x_range[0]) / self.cell)),
                int(math.floor((y - self.y_range[0]) / self.cell)))

    def cell_center(self, i: int, j: int) -> tuple:
        return (self.x_range[0] + (i + 0.5) * self.cell, self.y_range[0] + (j + 0.5) * self.cell)

    def in_range(self, x: float, y: float) -> bool:
        i, j = self.cell_of(x, y)
        return 0 <= i < self.H and 0 <= j < self.W


def bev_encode(points, bev: BevConfig) -> np.ndarray:
    """Pillar grid (H, W, 4): log1p(count), mean z, max z, mean intensity. Empty cells are 0."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    grid = np.zeros((bev.H, bev.W, 4), dtype=np.float32)
    if len(pts) == 0:
        return grid
    i = np.floor((pts[:, 0] - bev.x_range[0]) / bev.cell).astype(np.int64)
    j = np.floor((pts[:, 1] - bev.y_range[0]) / bev.cell).astype(np.int64)
    keep = (i >= 0) & (i < bev.H) & (j >= 0) & (j < bev.W)
    if not keep.any():
        return grid
    flat = i[keep] * bev.W + j[keep]
    z, inten = pts[keep, 2], pts[keep, 3]
    n = bev.H * bev.W
    count = np.bincount(flat, minlength=n).astype(np.float64)
    zsum = np.bincount(flat, weights=z, minlength=n)
    isum = np.bincount(flat, weights=inten, minlength=n)
    zmax = np.full(n, -np.inf)
    np.maximum.at(zmax, flat, z)
    occ = count > 0
    out = np.zeros((n, 4))
    out[occ, 0] = np.log1p(count[occ])
    out[occ, 1] = zsum[occ] / count[occ]
    out[occ, 2] = zmax[occ]
    out[occ, 3] = isum[occ] / count[occ]
    return out.reshape(bev.H, bev.W, 4).astype(np.float32)


def box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window around each cell, zero padded. Works on (H, W, ...)."""
    pad = [(r + 1, r), (r + 1, r)] + [(0, 0)] * (a.ndim - 2)
    c = np.pad(a.astype(np.float64), pad)
    c = c.cumsum(axis=0).cumsum(axis=1)
    k = 2 * r + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def pillar_context(grid: np.ndarray, radii=(1, 4)) -> np.ndarray:
    """Fixed (parameter-free) neighbourhood features appended to the pillar grid.

    Per radius r: window means of the four pillar channels, the occupancy
    weighted centroid offset of the window (cell units / r), and for the
    largest radius the weighted second moments (xx, yy, xy) / r^2.
    """
    h, w, _ = grid.shape
    weight = grid[..., 0].astype(np.float64)
    di = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    dj = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    feats = [grid.astype(np.float64)]
    for idx, r in enumerate(radii):
        area = (2 * r + 1) ** 2
        feats.append(box_sum(grid, r) / area)
        ws = box_sum(weight, r)
        safe = np.where(ws > 0, ws, 1.0)
        mi = box_sum(weight * di, r) / safe - di
        mj = box_sum(weight * dj, r) / safe - dj
        mi[ws <= 0] = 0.0
        mj[ws <= 0] = 0.0
        feats.append(np.stack([mi / r, mj / r], axis=-1))
        if idx == len(radii) - 1:
            ii = box_sum(weight * di * di, r) / safe - (mi + di) ** 2
            jj = box_sum(weight * dj * dj, r) / safe - (mj + dj) ** 2
            ij = box_sum(weight * di * dj, r) / safe - (mi + di) * (mj + dj)
            mom = np.stack([ii, jj, ij], axis=-1) / r ** 2
            mom[ws <= 0] = 0.0
            feats.append(mom)
    return np.concatenate(feats, axis=-1).astype(np.float32)


def context_channels(radii=(1, 4)) -> int:
    return 4 + len(radii) * 6 + 3


def lidar_input(points, bev: BevConfig) -> np.ndarray:
    return pillar_context(bev_encode(points, bev))


# -- detection targets ------------------------------------------------------

N_REG = 6  # dx, dy, log l, log w, sin 2yaw, cos 2yaw


def head_channels(bev: BevConfig) -> int:
    return len(bev.classes) + N_REG


@dataclass
class DetectionTarget:
    heatmap: np.ndarray  # (H, W, n_classes) in [0, 1]
    regression: np.ndarray  # (H, W, 6)
    mask: np.ndarray  # (H, W) bool, cells holding a box center


def encode_box(box: Box3D, bev: BevConfig) -> tuple:
    """(cell index, 6-vector) for a box; yaw is encoded modulo pi as a doubled angle."""
    i, j = bev.cell_of(box.center[0], box.center[1])
    cx, cy = bev.cell_center(i, j)
    vec = np.array([
        (box.center[0] - cx) / bev.cell,
        (box.center[1] - cy) / bev.cell,
        math.log(box.dims[0]),
        math.log(box.dims[1]),
        math.sin(2.0 * box.yaw),
        math.cos(2.0 * box.yaw),
    ])
    return (i, j), vec


def build_targets(boxes, bev: BevConfig, sigma: float = 0.75) -> DetectionTarget:
    heat = np.zeros((bev.H, bev.W, len(bev.classes)), dtype=np.float32)
    reg = np.zeros((bev.H, bev.W, N_REG), dtype=np.float32)
    mask = np.zeros((bev.H, bev.W), dtype=bool)
    ii, jj = np.meshgrid(np.arange(bev.H), np.arange(bev.W), indexing="ij")
    for box in boxes:
        if box.class_label not in bev.classes or not bev.in_range(*box.center[:2]):
            continue
        (i, j), vec = encode_box(box, bev)
        c = bev.classes.index(box.class_label)
        g = np.exp(-((ii - i) ** 2 + (jj - j) ** 2) / (2 * sigma ** 2))
        heat[..., c] = np.maximum(heat[..., c], g)
        reg[i, j] = vec
        mask[i, j] = True
    return DetectionTarget(heat, reg, mask)


def decode_box(i: int, j: int, vec, class_label: str, bev: BevConfig) -> Box3D:
    cx, cy = bev.cell_center(i, j)
    s, c = float(vec[4]), float(vec[5])
    norm = math.hypot(s, c)
    yaw = 0.5 * math.atan2(s / norm, c / norm) if norm > 0 else 0.0
    h = CLASS_DIMS.get(class_label, (1.0, 1.0, 1.5))[2]
    l = math.exp(min(float(vec[2]), 5.0))
    w = math.exp(min(float(vec[3]), 5.0))
    z = bev.ground_z + h / 2.0
    return Box3D((cx + float(vec[0]) * bev.cell, cy + float(vec[1]) * bev.cell, z), (l, w, h), yaw, class_label)


def peak_mask(scores: np.ndarray) -> np.ndarray:
    """Cells that hold the maximum of their 3x3 neighbourhood."""
    p = np.pad(scores, 1, constant_values=-np.inf)
    h, w = scores.shape
    nb = np.max(np.stack([p[a:a + h, b:b + w] for a in range(3) for b in range(3)]), axis=0)
    return scores >= nb
