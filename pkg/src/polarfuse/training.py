"""Assistant training on densified scenes, then fusion training with feature mimicking.

Phase one fits a LiDAR-only detector on enhanced scenes and freezes its
encoder. Phase two trains encoder + fusion + head (+ psi) on raw scenes and
camera grids with ``L_det + lam * L_sim(psi(f_lc), f*)``, where ``f*`` is the
frozen encoder applied to the enhanced version of the same scene.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, ShapeMismatch, Tensor
from .bev import BevConfig, DetectionTarget, build_targets, context_channels, lidar_input
from .fusion import Detector, FusionConfig, LidarEncoder, make_fusion
from .metrics import evaluate_detections, map_overall

log = logging.getLogger(__name__)


class DivergedLoss(FloatingPointError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    sim_loss: str = "L2"
    sim_reduction: str = "mean"
    epochs: int = 12
    lr: float = 0.005
    momentum: float = 0.9
    seed: int = 0
    fusion: str = "deep"
    K: int = 3
    hidden: Optional[int] = None
    camera_adapter: bool = False
    assistant_kind: str = "lidar"
    obj_weight: float = 1.0
    reg_weight: float = 2.0
    pos_weight: float = 4.0
    grad_clip: float = 5.0
    score_thr: float = 0.1
    nms_iou: float = 0.1
    eval_every: int = 0  # 0: evaluate only after the last epoch
    cache_targets: bool = False
    iou_thresholds: tuple = ()

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.sim_loss not in ("L1", "L2"):
            raise ValueError("sim_loss must be L1 or L2")
        if self.sim_reduction not in ("mean", "sum"):
            raise ValueError("sim_reduction must be mean or sum")
        thr = self.iou_thresholds
        pairs = thr.items() if isinstance(thr, dict) else thr
        object.__setattr__(self, "iou_thresholds", tuple((str(c), float(t)) for c, t in pairs))

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(K=self.K, hidden=self.hidden, kind=self.fusion)


@dataclass
class Sample:
    frame_id: str
    lidar: np.ndarray
    target: DetectionTarget
    boxes: list
    camera: Optional[np.ndarray] = None
    enhanced: Optional[np.ndarray] = None


def make_samples(scenes, bev: BevConfig, cameras=None, enhanced=None) -> List[Sample]:
    """Precompute encoder inputs and targets. ``scenes`` may be enhanced already."""
    out = []
    for k, scene in enumerate(scenes):
        boxes = scene.boxes
        out.append(Sample(
            scene.frame_id,
            lidar_input(scene.all_points(), bev),
            build_targets(boxes, bev),
            boxes,
            None if cameras is None else cameras[k],
            None if enhanced is None else lidar_input(enhanced[k].all_points(), bev),
        ))
    return out


# -- losses -----------------------------------------------------------------

def target_entropy(t: np.ndarray) -> np.ndarray:
    """Per-cell Bernoulli entropy of a soft target (0 where the target is 0 or 1)."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    out = np.zeros_like(t)
    soft = (t > 0) & (t < 1)
    ts = t[soft]
    out[soft] = -(ts * np.log(ts) + (1 - ts) * np.log1p(-ts))
    return out


def detection_loss(pred: Tensor, target: DetectionTarget, cfg: TrainConfig = TrainConfig()) -> tuple:
    """BCE on class heatmaps plus masked L1 on the 6 regression channels.

    Returns ``(total, objectness_term, regression_term)``. Heatmap cells are
    weighted ``1 + pos_weight * target`` and the BCE sum is divided by the
    number of object centers (at least 1), so its scale does not shrink with
    the grid size. The objectness term is reported net of the soft-target
    entropy, i.e. as a KL divergence.
    """
    n_cls = target.heatmap.shape[-1]
    logits = ag.slice_channels(pred, 0, n_cls)
    reg = ag.slice_channels(pred, n_cls, n_cls + 6)
    weight = 1.0 + cfg.pos_weight * target.heatmap
    norm = max(1.0, float(target.mask.sum()))
    l_obj = ag.bce_with_logits(logits, target.heatmap, weight, norm)
    # soft targets make the BCE bounded below by their entropy; subtracting it
    # (a constant, so gradients are unchanged) reports the excess, which is 0 at a perfect fit
    floor = float((weight * target_entropy(target.heatmap)).sum() / norm)
    if floor > 0:
        l_obj = ag.sub(l_obj, Tensor(np.asarray(floor, dtype=l_obj.data.dtype)))
    l_reg = ag.masked_l1(reg, target.regression, target.mask)
    total = ag.add(ag.scale(l_obj, cfg.obj_weight), ag.scale(l_reg, cfg.reg_weight))
    return total, l_obj, l_reg


def sim_loss(f_lc: Tensor, f_star, psi, kind: str = "L2", reduction: str = "mean") -> Tensor:
    """Distance between ``psi(f_lc)`` and the high-quality feature ``f_star``."""
    projected = psi(f_lc) if psi is not None else f_lc
    target = f_star if isinstance(f_star, Tensor) else Tensor(np.asarray(f_star, dtype=projected.data.dtype))
    if projected.shape != target.shape:
        raise ShapeMismatch(f"sim loss: {projected.shape} vs {target.shape}")
    if kind == "L2":
        return ag.mse(projected, target, reduction)
    return ag.l1(projected, target, reduction)


# -- assistant --------------------------------------------------------------

@dataclass(frozen=True)
class AssistantSnapshot:
    params: Dict[str, np.ndarray]
    bev_fingerprint: str
    kind: str = "lidar"
    fusion: Optional[FusionConfig] = None

    def __post_init__(self):
        frozen = {}
        for k, v in self.params.items():
            arr = np.array(v, dtype=np.float32)
            arr.setflags(write=False)
            frozen[k] = arr
        object.__setattr__(self, "params", frozen)


def _clip(params, max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if not math.isfinite(total):
        raise DivergedLoss("non-finite gradient norm")
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total


def _check(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergedLoss(f"{what} became non-finite")
    return value


def evaluate(model: Detector, samples: Sequence[Sample], cfg: TrainConfig, use_camera: bool = False) -> dict:
    dets = [model.predict(s.lidar, s.camera if use_camera else None, cfg.score_thr, cfg.nms_iou) for s in samples]
    per_class = evaluate_detections(dets, [s.boxes for s in samples], model.bev.classes, dict(cfg.iou_thresholds))
    return {"per_class": per_class, "overall": map_overall(per_class) if per_class else 0.0,
            "detections": dets}


def train_detector(model: Detector, samples: Sequence[Sample], cfg: TrainConfig,
                   val: Optional[Sequence[Sample]] = None, use_camera: bool = False,
                   snapshot: Optional[AssistantSnapshot] = None) -> list:
    """SGD over scenes, one step per scene. Returns per-epoch log rows.

    When ``snapshot`` is given the feature-mimicking loss is computed against
    the frozen assistant features of each sample's enhanced grid; it enters
    the gradient only when ``cfg.lam > 0``.
    """
    params = model.parameters()
    opt = ag.SGD(params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 7])
    cache: dict = {}
    rows = []
    for epoch in range(cfg.epochs):
        det_sum = sim_sum = 0.0
        for idx in rng.permutation(len(samples)):
            s = samples[idx]
            opt.zero_grad()
            try:
                f, out = model.forward(s.lidar, s.camera if use_camera else None)
                total, _, _ = detection_loss(out, s.target, cfg)
                l_det = _check(total.item(), "detection loss")
                if snapshot is not None:
                    if cfg.cache_targets and s.frame_id in cache:
                        f_star = cache[s.frame_id]
                    else:
                        f_star = high_quality_features(snapshot, s, model.bev)
                        if cfg.cache_targets:
                            cache[s.frame_id] = f_star
                    l_sim_t = sim_loss(f, f_star, model.psi, cfg.sim_loss, cfg.sim_reduction)
                    sim_sum += _check(l_sim_t.item(), "sim loss")
                    if cfg.lam > 0:
                        total = ag.add(total, ag.scale(l_sim_t, cfg.lam))
                ag.backward(total)
            except NonFiniteError as exc:
                raise DivergedLoss(str(exc)) from None
            _clip(params, cfg.grad_clip)
            opt.step()
            det_sum += l_det
        n = max(len(samples), 1)
        row = {"epoch": epoch, "L_det": det_sum / n, "L_sim": sim_sum / n if snapshot is not None else float("nan"),
               "mAP": float("nan")}
        last = epoch == cfg.epochs - 1
        if val is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            row["mAP"] = evaluate(model, val, cfg, use_camera)["overall"]
        log.info("epoch %d L_det %.4f L_sim %.4f mAP %.4f", epoch, row["L_det"], row["L_sim"], row["mAP"])
        rows.append(row)
    return rows


def train_assistant(samples: Sequence[Sample], bev: BevConfig, cfg: TrainConfig,
                    val: Optional[Sequence[Sample]] = None) -> tuple:
    """Fit a LiDAR-only detector on enhanced samples; return (snapshot, detector, log).

    With ``cfg.assistant_kind == "fusion"`` the assistant is a full fusion
    detector instead and the snapshot keeps its encoder and fusion weights.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    fusion = cfg.fusion_config() if cfg.assistant_kind == "fusion" else None
    model = Detector(bev, fusion, rng, camera_adapter=False, with_psi=False)
    rows = train_detector(model, samples, cfg, val, use_camera=fusion is not None)
    keep = model.encoder.state_dict()
    if fusion is not None:
        keep.update(model.fusion.state_dict())
    snap = AssistantSnapshot(keep, bev.fingerprint(), cfg.assistant_kind, fusion)
    return snap, model, rows


def high_quality_features(snapshot: AssistantSnapshot, sample, bev: BevConfig) -> np.ndarray:
    """Frozen-encoder features of the enhanced scene; never part of any gradient graph."""
    if snapshot.bev_fingerprint != bev.fingerprint():
        raise ConfigMismatch("assistant was trained under a different BEV configuration")
    grid = sample.enhanced if isinstance(sample, Sample) else sample
    if grid is None:
        raise ValueError(f"sample {getattr(sample, 'frame_id', '?')} has no enhanced grid")
    rng = np.random.default_rng(0)
    enc = LidarEncoder(context_channels(), bev.c_l, rng)
    enc.load_state_dict(snapshot.params)
    f = enc(Tensor(np.asarray(grid, np.float32)))
    if snapshot.kind == "fusion":
        fusion = make_fusion(snapshot.fusion, bev.c_l, bev.c_c, rng)
        fusion.load_state_dict(snapshot.params)
        f = fusion(f, Tensor(np.asarray(sample.camera, np.float32)))
    return f.data.copy()


def train_fusion(samples: Sequence[Sample], snapshot: AssistantSnapshot, bev: BevConfig, cfg: TrainConfig,
                 val: Optional[Sequence[Sample]] = None) -> tuple:
    """Train the fusion detector on raw samples (with camera + enhanced grids); returns (model, log)."""
    if snapshot.bev_fingerprint != bev.fingerprint():
        raise ConfigMismatch("assistant was trained under a different BEV configuration")
    rng = np.random.default_rng([cfg.seed, 2])
    model = Detector(bev, cfg.fusion_config(), rng, camera_adapter=cfg.camera_adapter)
    rows = train_detector(model, samples, cfg, val, use_camera=True, snapshot=snapshot)
    return model, rows


def format_log(rows) -> str:
    return "".join(f"{r['epoch']}\t{r['L_det']:.6f}\t{r['L_sim']:.6f}\t{r['mAP']:.6f}\n" for r in rows)


# -- checkpoints ------------------------------------------------------------

def _finite_or_none(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def save_checkpoint(model: Detector, role: str, stamp: dict, rows=(), metrics: Optional[dict] = None,
                    assistant_kind: str = "lidar") -> bytes:
    """Detector weights in the tensor container; metadata carries the log and metrics."""
    meta = dict(stamp)
    meta.update({
        "role": role,
        "assistant_kind": assistant_kind,
        "fusion": None if model.fusion_cfg is None else asdict(model.fusion_cfg),
        "camera_adapter": model.adapter is not None,
        "with_psi": model.psi is not None,
        "head_hidden": int(model.head.hidden.weight.shape[1]),
        "log": [{k: _finite_or_none(v) for k, v in r.items()} for r in rows],
        "metrics": metrics or {},
    })
    return ag.save_tensors(model.state_dict(), meta)


def load_checkpoint(data: bytes, bev: BevConfig) -> tuple:
    """Rebuild the detector stored by ``save_checkpoint``; returns (detector, meta)."""
    tensors, meta = ag.load_tensors(data)
    if meta.get("bev_fingerprint") != bev.fingerprint():
        raise ConfigMismatch(f"checkpoint BEV fingerprint {meta.get('bev_fingerprint')} "
                             f"does not match the configured {bev.fingerprint()}")
    fusion = FusionConfig(**meta["fusion"]) if meta.get("fusion") else None
    model = Detector(bev, fusion, np.random.default_rng(0), camera_adapter=meta.get("camera_adapter", False),
                     with_psi=meta.get("with_psi", False), head_hidden=meta.get("head_hidden", 32))
    model.load_state_dict(tensors)
    return model, meta


def snapshot_from_checkpoint(data: bytes, bev: BevConfig) -> AssistantSnapshot:
    model, meta = load_checkpoint(data, bev)
    if meta.get("role") != "assistant":
        raise ConfigMismatch(f"expected an assistant checkpoint, got role {meta.get('role')!r}")
    keep = model.encoder.state_dict()
    if model.fusion is not None:
        keep.update(model.fusion.state_dict())
    return AssistantSnapshot(keep, bev.fingerprint(), meta.get("assistant_kind", "lidar"), model.fusion_cfg)
