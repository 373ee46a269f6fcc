"""Rotated BEV IoU, greedy NMS and KITTI-style AP over 40 recall points."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .geometry import Box3D

AREA_EPS = 1e-12
DEFAULT_IOU = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
R40 = [i / 40.0 for i in range(1, 41)]


class NoClasses(ValueError):
    pass


@dataclass(frozen=True)
class ScoredBox:
    box: Box3D
    score: float


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` clipped by convex counter-clockwise ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprints in the xy-plane."""
    da = a.dims[0] * a.dims[1]
    db = b.dims[0] * b.dims[1]
    reach = 0.5 * (np.hypot(a.dims[0], a.dims[1]) + np.hypot(b.dims[0], b.dims[1]))
    if np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > reach:
        return 0.0
    inter = polygon_area(clip_polygon(a.corners_bev(), b.corners_bev()))
    if inter <= AREA_EPS:
        return 0.0
    return float(min(1.0, inter / (da + db - inter)))


def nms(boxes: Sequence[Box3D], scores: Sequence[float], iou_threshold: float) -> List[int]:
    """Greedy suppression; returns kept indices in descending score order."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: List[int] = []
    for i in order:
        if all(bev_iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


def match_frame(dets: Sequence[ScoredBox], gts: Sequence[Box3D], thr: float) -> List[bool]:
    """TP flags for ``dets`` in descending-score order; each takes its best free GT."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(gts)
    tp = [False] * len(dets)
    for i in order:
        best, best_iou = -1, thr
        for g, gt in enumerate(gts):
            if used[g]:
                continue
            iou = bev_iou(dets[i].box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            used[best] = True
            tp[i] = True
    return tp


def precision_recall(detections: Sequence[Sequence[ScoredBox]], ground_truth: Sequence[Sequence[Box3D]],
                     iou_threshold: float) -> tuple:
    scores, flags = [], []
    for dets, gts in zip(detections, ground_truth):
        scores += [d.score for d in dets]
        flags += match_frame(dets, gts, iou_threshold)
    n_gt = sum(len(g) for g in ground_truth)
    if not scores:
        return np.zeros(0), np.zeros(0), n_gt
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.cumsum(np.asarray(flags, dtype=np.int64)[order])
    fp = np.cumsum(~np.asarray(flags, dtype=bool)[order])
    precision = tp / (tp + fp)
    recall = tp / n_gt if n_gt else np.zeros(len(tp))
    return precision, recall, n_gt


def ap_r40(detections: Sequence[Sequence[ScoredBox]], ground_truth: Sequence[Sequence[Box3D]],
           iou_threshold: float) -> float:
    """Mean of interpolated precision at recall 1/40 ... 40/40 for one class.

    ``detections`` and ``ground_truth`` are per-frame lists, already filtered to
    the class being scored.
    """
    precision, recall, n_gt = precision_recall(detections, ground_truth, iou_threshold)
    if n_gt == 0 or len(precision) == 0:
        return 0.0
    # max precision over operating points with recall >= r
    best_from = np.maximum.accumulate(precision[::-1])[::-1]
    vals = []
    for r in R40:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        vals.append(float(best_from[idx]) if idx < len(recall) else 0.0)
    return sum(vals) / 40.0


def map_overall(per_class: Dict[str, float]) -> float:
    if not per_class:
        raise NoClasses("no classes to average")
    return sum(per_class.values()) / len(per_class)


def evaluate_detections(detections, ground_truth, classes, iou_thresholds=None) -> Dict[str, float]:
    """Per-class AP@R40 over frames; ``detections``/``ground_truth`` hold per-frame box lists.

    Detections are ``(Box3D, score)`` pairs or ``ScoredBox``; classes without GT
    in the split are skipped.
    """
    thr = dict(DEFAULT_IOU)
    thr.update(iou_thresholds or {})
    out = {}
    for cls in classes:
        gts = [[b for b in frame if b.class_label == cls] for frame in ground_truth]
        if not any(gts):
            continue
        dets = [[d if isinstance(d, ScoredBox) else ScoredBox(*d) for d in frame] for frame in detections]
        dets = [[d for d in frame if d.box.class_label == cls] for frame in dets]
        out[cls] = ap_r40(dets, gts, thr.get(cls, 0.5))
    return out


# -- detection dump ---------------------------------------------------------

def format_detections(dets: Sequence[ScoredBox]) -> str:
    lines = []
    for d in dets:
        b = d.box
        vals = [d.score, *b.center, *b.dims, b.yaw]
        lines.append(" ".join([b.class_label] + [repr(float(v)) for v in vals]))
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str) -> List[ScoredBox]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        f = line.split()
        if not f:
            continue
        if len(f) != 9:
            raise ValueError(f"detection line {lineno}: expected 9 fields, got {len(f)}")
        v = [float(x) for x in f[1:]]
        out.append(ScoredBox(Box3D(tuple(v[1:4]), tuple(v[4:7]), v[7], f[0]), v[0]))
    return out
