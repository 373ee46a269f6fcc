"""LiDAR encoder, camera feature provider, fusion modules, feature projection and detection head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatch, Tensor
from .bev import BevConfig, context_channels, decode_box, head_channels, peak_mask
from .metrics import ScoredBox, nms

FUSION_KINDS = ("sum", "concat", "deep")


@dataclass(frozen=True)
class FusionConfig:
    K: int = 3
    hidden: Optional[int] = None  # defaults to c_l + c_c
    kind: str = "deep"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("deep fusion depth K must be >= 1")
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"fusion kind must be one of {FUSION_KINDS}")


class Module:
    """Parameter container; parameters are registered in creation order under stable names."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add_param(self, name: str, values) -> Tensor:
        t = ag.param(name, values)
        self._params[name] = t
        return t

    def parameters(self) -> List[Tensor]:
        out = list(self._params.values())
        for child in self.children():
            out += child.parameters()
        return out

    def children(self) -> list:
        return [v for v in vars(self).values() if isinstance(v, Module)] + [
            m for v in vars(self).values() if isinstance(v, list) for m in v if isinstance(m, Module)
        ]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.data.shape:
                raise ShapeMismatch(f"{p.name}: {state[p.name].shape} vs {p.data.shape}")
            p.data = np.array(state[p.name], dtype=p.data.dtype)
            p.grad = np.zeros_like(p.data)


class Conv1x1(Module):
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator,
                 dtype=np.float32, init: str = "he"):
        super().__init__()
        if init == "he":
            w = rng.standard_normal((cin, cout)) * math.sqrt(2.0 / cin)
        elif init == "xavier":
            w = rng.standard_normal((cin, cout)) * math.sqrt(1.0 / cin)
        elif init == "identity":
            w = np.eye(cin, cout)
        elif init == "zero":
            w = np.zeros((cin, cout))
        else:
            raise ValueError(init)
        self.weight = self.add_param(f"{name}.weight", w.astype(dtype))
        self.bias = self.add_param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1x1(x, self.weight, self.bias)


class LidarEncoder(Module):
    """Three conv1x1 + relu layers over the pillar/context grid."""

    def __init__(self, cin: int, c_l: int, rng, dtype=np.float32, prefix: str = "lidar"):
        super().__init__()
        self.layers = [
            Conv1x1(f"{prefix}.0", cin, c_l, rng, dtype),
            Conv1x1(f"{prefix}.1", c_l, c_l, rng, dtype),
            Conv1x1(f"{prefix}.2", c_l, c_l, rng, dtype),
        ]

    def __call__(self, grid) -> Tensor:
        x = grid if isinstance(grid, Tensor) else Tensor(grid)
        for layer in self.layers:
            x = ag.relu(layer(x))
        return x


class CameraAdapter(Module):
    """Optional trainable 1-layer map applied to provided camera grids."""

    def __init__(self, c_c: int, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv1x1("camera.adapter", c_c, c_c, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.relu(self.proj(x))


class SumFusion(Module):
    def __init__(self, c_l: int, c_c: int, rng, dtype=np.float32):
        super().__init__()
        self.cam = Conv1x1("fusion.cam", c_c, c_l, rng, dtype)

    def __call__(self, f_l: Tensor, f_c: Tensor) -> Tensor:
        if f_l.shape[:2] != f_c.shape[:2]:
            raise ShapeMismatch(f"fusion grids {f_l.shape} vs {f_c.shape}")
        return ag.add(f_l, self.cam(f_c))


class ConcatFusion(Module):
    def __init__(self, c_l: int, c_c: int, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv1x1("fusion.proj", c_l + c_c, c_l, rng, dtype)

    def __call__(self, f_l: Tensor, f_c: Tensor) -> Tensor:
        return self.proj(ag.concat_channels(f_l, f_c))


class DeepFusion(Module):
    """3D learner, K stacked MLP blocks on [3D, camera], then a sigmoid-gated residual.

    ``out = f_l + sigmoid(gate(h)) * proj(h)``.
    """

    def __init__(self, c_l: int, c_c: int, rng, K: int = 3, hidden: Optional[int] = None,
                 dtype=np.float32):
        super().__init__()
        hidden = hidden or (c_l + c_c)
        self.learner3d = Conv1x1("fusion.learner3d", c_l, c_l, rng, dtype)
        self.blocks = [Conv1x1(f"fusion.block{k}", c_l + c_c if k == 0 else hidden, hidden, rng, dtype)
                       for k in range(K)]
        self.proj = Conv1x1("fusion.proj", hidden, c_l, rng, dtype, init="xavier")
        self.gate = Conv1x1("fusion.gate", hidden, c_l, rng, dtype, init="xavier")

    def __call__(self, f_l: Tensor, f_c: Tensor) -> Tensor:
        if f_l.shape[:2] != f_c.shape[:2]:
            raise ShapeMismatch(f"fusion grids {f_l.shape} vs {f_c.shape}")
        h = ag.concat_channels(self.learner3d(f_l), f_c)
        for block in self.blocks:
            h = ag.relu(block(h))
        p = self.proj(h)
        w = ag.sigmoid(self.gate(h))
        return ag.add(f_l, ag.mul(w, p))


def make_fusion(cfg: FusionConfig, c_l: int, c_c: int, rng, dtype=np.float32) -> Module:
    if cfg.kind == "sum":
        return SumFusion(c_l, c_c, rng, dtype)
    if cfg.kind == "concat":
        return ConcatFusion(c_l, c_c, rng, dtype)
    return DeepFusion(c_l, c_c, rng, cfg.K, cfg.hidden, dtype)


class Psi(Module):
    """Kernel-size-1 projection applied to the fusion feature before feature mimicking."""

    def __init__(self, c_l: int, rng, dtype=np.float32, init: str = "identity"):
        super().__init__()
        self.conv = Conv1x1("psi", c_l, c_l, rng, dtype, init=init)

    def __call__(self, f: Tensor) -> Tensor:
        return self.conv(f)


class DetectionHead(Module):
    """conv1x1 + relu, then conv1x1 to (class logits..., dx, dy, log l, log w, sin 2yaw, cos 2yaw)."""

    def __init__(self, c_in: int, n_out: int, rng, hidden: int = 32, dtype=np.float32, prior: float = 0.01):
        super().__init__()
        self.hidden = Conv1x1("head.hidden", c_in, hidden, rng, dtype)
        self.out = Conv1x1("head.out", hidden, n_out, rng, dtype, init="xavier")
        self.out.weight.data *= 0.1
        self.n_cls = n_out - 6
        self.out.bias.data[: self.n_cls] = math.log(prior / (1 - prior))

    def __call__(self, f: Tensor) -> Tensor:
        return self.out(ag.relu(self.hidden(f)))


# -- camera features --------------------------------------------------------

def save_camera_grid(grid: np.ndarray) -> bytes:
    return ag.save_tensors({"camera": np.asarray(grid, np.float32)}, {"kind": "camera"})


def load_camera_grid(data: bytes, bev: Optional[BevConfig] = None) -> np.ndarray:
    tensors, _ = ag.load_tensors(data)
    grid = tensors["camera"]
    if bev is not None and grid.shape != (bev.H, bev.W, bev.c_c):
        raise ShapeMismatch(f"camera grid {grid.shape} vs BEV ({bev.H}, {bev.W}, {bev.c_c})")
    return grid


def camera_feature(source, bev: BevConfig, sim_cfg=None, index: Optional[int] = None) -> np.ndarray:
    """Camera grid from a container file path/bytes, or rendered from boxes via the simulator."""
    if isinstance(source, (str, Path)):
        return load_camera_grid(Path(source).read_bytes(), bev)
    if isinstance(source, (bytes, bytearray)):
        return load_camera_grid(bytes(source), bev)
    from .simulator import render_camera_grid

    grid = render_camera_grid(source, bev, sim_cfg, index)
    if grid.shape != (bev.H, bev.W, bev.c_c):
        raise ShapeMismatch(f"camera grid {grid.shape}")
    return grid


# -- detector ---------------------------------------------------------------

class Detector(Module):
    """LiDAR encoder, optional camera adapter and fusion, detection head, optional psi."""

    def __init__(self, bev: BevConfig, fusion: Optional[FusionConfig], rng, dtype=np.float32,
                 camera_adapter: bool = False, with_psi: bool = True, head_hidden: int = 32):
        super().__init__()
        self.bev = bev
        self.fusion_cfg = fusion
        self.encoder = LidarEncoder(context_channels(), bev.c_l, rng, dtype)
        self.adapter = CameraAdapter(bev.c_c, rng, dtype) if (fusion and camera_adapter) else None
        self.fusion = make_fusion(fusion, bev.c_l, bev.c_c, rng, dtype) if fusion else None
        self.head = DetectionHead(bev.c_l, head_channels(bev), rng, head_hidden, dtype)
        self.psi = Psi(bev.c_l, rng, dtype) if (fusion and with_psi) else None
        self.dtype = dtype

    def features(self, lidar_grid: np.ndarray, camera_grid: Optional[np.ndarray] = None) -> Tensor:
        f_l = self.encoder(Tensor(np.asarray(lidar_grid, dtype=self.dtype)))
        if self.fusion is None:
            return f_l
        f_c = Tensor(np.asarray(camera_grid, dtype=self.dtype))
        if self.adapter is not None:
            f_c = self.adapter(f_c)
        return self.fusion(f_l, f_c)

    def forward(self, lidar_grid, camera_grid=None) -> tuple:
        f = self.features(lidar_grid, camera_grid)
        return f, self.head(f)

    def predict(self, lidar_grid, camera_grid=None, score_thr: float = 0.1, iou_thr: float = 0.1) -> list:
        _, out = self.forward(lidar_grid, camera_grid)
        return decode_nms(out.data, self.bev, score_thr, iou_thr)


def decode_nms(raw: np.ndarray, bev: BevConfig, score_thr: float = 0.1, iou_thr: float = 0.1,
               max_per_class: int = 50) -> list:
    """Head output (H, W, n_cls + 6) -> ScoredBox list after peak picking and per-class NMS."""
    n_cls = len(bev.classes)
    logits = raw[..., :n_cls].astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    out = []
    for c, label in enumerate(bev.classes):
        s = scores[..., c]
        cand = np.argwhere(peak_mask(s) & (s >= score_thr))
        if len(cand) == 0:
            continue
        order = np.argsort(-s[cand[:, 0], cand[:, 1]], kind="stable")[:max_per_class]
        boxes = [decode_box(int(i), int(j), raw[i, j, n_cls:], label, bev) for i, j in cand[order]]
        sc = [float(s[i, j]) for i, j in cand[order]]
        out += [ScoredBox(boxes[k], sc[k]) for k in nms(boxes, sc, iou_thr)]
    return out
