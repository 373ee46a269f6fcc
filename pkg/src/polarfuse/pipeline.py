"""In-memory benchmark runs shared by the CLI and the acceptance suite.

A ``Benchmark`` holds the synthetic train/val splits, the dense-object
database built from the training split only, enhanced copies of both splits
and the camera grids. The helpers here run the two reproductions: the
assistant gap (enhanced vs raw LiDAR-only detector) and the fusion x
supervision grid.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from .config import RunConfig, with_train
from .pasting import enhance_scene
from .sampling_db import DenseObjectDB, build_database
from .simulator import generate_scene, render_camera_grid
from .training import evaluate, make_samples, train_assistant, train_fusion

log = logging.getLogger(__name__)


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Order-preserving map; ``threads=1`` is the plain sequential reference path."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class Benchmark:
    cfg: RunConfig
    train_raw: list
    val_raw: list
    db: DenseObjectDB
    train_enh: list
    val_enh: list
    train_cam: list
    val_cam: list


def build_benchmark(cfg: RunConfig, threads: int = 1) -> Benchmark:
    sim, bev = cfg.sim, cfg.bev
    tr_idx, va_idx = list(sim.train_indices()), list(sim.val_indices())
    train = [s for s, _ in parallel_map(lambda i: generate_scene(sim, i), tr_idx, threads)]
    val = [s for s, _ in parallel_map(lambda i: generate_scene(sim, i), va_idx, threads)]
    db = build_database(train, cfg.db, meta={"split": "train"})
    train_enh = parallel_map(lambda s: enhance_scene(s, db), train, threads)
    val_enh = parallel_map(lambda s: enhance_scene(s, db), val, threads)
    cam = lambda pair: render_camera_grid(pair[0].boxes, bev, sim, pair[1])  # noqa: E731
    return Benchmark(cfg, train, val, db, train_enh, val_enh,
                     parallel_map(cam, zip(train, tr_idx), threads),
                     parallel_map(cam, zip(val, va_idx), threads))


def assistant_gap(bench: Benchmark) -> dict:
    """mAP of the LiDAR-only detector trained+evaluated on enhanced vs raw scenes.

    The enhanced run is the assistant; its frozen snapshot is returned under
    ``"snapshot"`` so a following ``supervision_grid`` can reuse it.
    """
    cfg, bev = bench.cfg, bench.cfg.bev
    out = {}
    for name, tr, va in (("enhanced", bench.train_enh, bench.val_enh), ("raw", bench.train_raw, bench.val_raw)):
        samples, val = make_samples(tr, bev), make_samples(va, bev)
        snap, model, rows = train_assistant(samples, bev, cfg.train)
        res = evaluate(model, val, cfg.train)
        out[name] = {"overall": res["overall"], "per_class": res["per_class"], "log": rows}
        if name == "enhanced":
            out["snapshot"] = snap
        log.info("assistant on %s scenes: mAP %.4f", name, res["overall"])
    out["gap"] = out["enhanced"]["overall"] - out["raw"]["overall"]
    return out


def supervision_grid(bench: Benchmark, kinds: Sequence[str] = ("sum", "concat", "deep"),
                     lams: Sequence[float] = (0.0, 1.0), snapshot=None,
                     assistant_map: Optional[float] = None) -> dict:
    """Train every (fusion kind, lam) pair on raw scenes against one frozen assistant.

    Returns ``{"assistant": mAP, "runs": {(kind, lam): {...}}}``.
    """
    cfg, bev = bench.cfg, bench.cfg.bev
    out: Dict = {"runs": {}, "assistant": assistant_map}
    if snapshot is None:
        enh = make_samples(bench.train_enh, bev)
        snapshot, model, _ = train_assistant(enh, bev, cfg.train)
        out["assistant"] = evaluate(model, make_samples(bench.val_enh, bev), cfg.train)["overall"]
    samples = make_samples(bench.train_raw, bev, bench.train_cam, bench.train_enh)
    val = make_samples(bench.val_raw, bev, bench.val_cam, bench.val_enh)
    for kind in kinds:
        for lam in lams:
            run_cfg = with_train(cfg, fusion=kind, lam=float(lam))
            model, rows = train_fusion(samples, snapshot, bev, run_cfg.train)
            res = evaluate(model, val, run_cfg.train, use_camera=True)
            out["runs"][(kind, float(lam))] = {"overall": res["overall"], "per_class": res["per_class"],
                                               "L_sim": rows[-1]["L_sim"], "log": rows}
            log.info("fusion %s lam %.2f: L_sim %.4f mAP %.4f", kind, lam, rows[-1]["L_sim"], res["overall"])
    return out


def median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=float)))
