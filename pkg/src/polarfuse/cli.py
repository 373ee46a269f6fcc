"""Command-line interface.

Every subcommand reads ``--config`` (YAML, see ``polarfuse.config``) plus
``--set section.key=value`` overrides and writes its resolved config beside
its outputs. Exit codes: 0 success, 2 config error, 3 data error,
4 diverged training or failed check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as C
from .autograd import ContainerError, NonFiniteError, ShapeMismatch
from .config import ConfigError, RunConfig
from .fusion import camera_feature, save_camera_grid
from .geometry import Scene
from .kitti import (
    SPLIT_MARKER,
    CalibMatrices,
    KittiFormatError,
    crop_objects,
    frame_ids,
    load_frame,
    read_calib,
    read_velodyne,
    scene_ply,
    split_tag,
    write_frame,
    write_velodyne,
)
from .metrics import evaluate_detections, format_detections, map_overall, parse_detections
from .pasting import NoDonor, enhance_scene
from .pipeline import default_threads, parallel_map
from .sampling_db import DbFormatError, EmptyObject, build_database, load_db, save_db
from .simulator import PlacementFailure, frame_name, generate_scene, render_camera_grid
from .training import (
    ConfigMismatch,
    DivergedLoss,
    evaluate,
    format_log,
    load_checkpoint,
    make_samples,
    save_checkpoint,
    snapshot_from_checkpoint,
    train_assistant,
    train_fusion,
)

log = logging.getLogger("polarfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FAILED = 0, 2, 3, 4


class DataError(Exception):
    pass


class LeakGuard(DataError):
    """Raised when a validation split is offered where only training data may be used."""


class CheckFailed(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _beside(cfg: RunConfig, out: Path, is_dir: bool) -> Path:
    """Write the resolved config next to an output directory or file."""
    if is_dir:
        return C.write_resolved(cfg, out)
    out.parent.mkdir(parents=True, exist_ok=True)
    path = out.with_name(out.name + ".config.yaml")
    path.write_text(cfg.to_yaml())
    return path


def _require_split(root: Path) -> List[str]:
    if not (root / "velodyne").is_dir():
        raise DataError(f"{root} is not a split directory (no velodyne/)")
    ids = frame_ids(root)
    if not ids:
        raise DataError(f"{root} holds no frames")
    return ids


def _guard_train(root: Path, what: str) -> None:
    tag = split_tag(root)
    if tag == "val":
        raise LeakGuard(
            f"refusing to {what} from {root}: it is tagged as a validation split. "
            "Dense objects and training signal must come from the training set only, "
            "otherwise validation objects leak into training.")
    if tag is None:
        log.warning("%s has no %s marker; assuming it is training data", root, SPLIT_MARKER)


def _load_scenes(root: Path, margin: float, threads: int) -> List[Scene]:
    ids = _require_split(root)
    return parallel_map(lambda fid: load_frame(root, fid, margin), ids, threads)


def _load_cameras(root: Path, ids, cfg: RunConfig) -> list:
    cams = []
    for fid in ids:
        path = root / "camera" / f"{fid}.pftc"
        if not path.exists():
            raise DataError(f"missing camera grid {path}")
        cams.append(camera_feature(path, cfg.bev))
    return cams


def _scene_with_added(root: Path, fid: str, margin: float) -> Scene:
    """Load a frame; if the split stores added points, mark the trailing ones as added."""
    scene = load_frame(root, fid, margin)
    added_path = root / "added" / f"{fid}.bin"
    if not added_path.exists():
        return scene
    added = read_velodyne(added_path.read_bytes())
    if len(added) == 0:
        return scene
    pts = read_velodyne((root / "velodyne" / f"{fid}.bin").read_bytes())
    raw = crop_objects(pts[: len(pts) - len(added)], scene.boxes, margin, fid)
    if not raw.objects:
        raw.background = np.vstack([raw.background, added])
        return raw
    # stored added points are not split per object; attach them all to the first
    empty = np.zeros((0, 4), np.float32)
    raw.added = [added] + [empty] * (len(raw.objects) - 1)
    return raw


def _stamp_metrics(per_class: dict) -> dict:
    return {"per_class": per_class, "overall": map_overall(per_class) if per_class else 0.0}


def _ap_table(per_class: dict, classes) -> str:
    lines = ["class\tAP_R40"]
    for c in classes:
        lines.append(f"{c}\t{100.0 * per_class.get(c, 0.0):.2f}")
    overall = map_overall(per_class) if per_class else 0.0
    lines.append(f"Overall\t{100.0 * overall:.2f}")
    return "\n".join(lines) + "\n"


# -- subcommands -------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    calib = CalibMatrices.standard()
    sim, bev = cfg.sim, cfg.bev
    for split, idx in (("train", sim.train_indices()), ("val", sim.val_indices())):
        root = out / split
        root.mkdir(parents=True, exist_ok=True)
        (root / SPLIT_MARKER).write_text(split + "\n")
        (root / "camera").mkdir(exist_ok=True)

        def one(i, root=root):
            scene, boxes = generate_scene(sim, i)
            fid = frame_name(i)
            write_frame(root, fid, scene.all_points(), boxes, calib)
            (root / "camera" / f"{fid}.pftc").write_bytes(save_camera_grid(render_camera_grid(boxes, bev, sim, i)))
            return len(boxes)

        counts = parallel_map(one, list(idx), args.threads)
        log.info("%s: %d frames, %d objects", split, len(counts), sum(counts))
    _write_json(out / "manifest.json", {**cfg.stamp(), "train_frames": sim.n_train, "val_frames": sim.n_val})
    _beside(cfg, out, True)
    print(f"wrote {sim.n_train} train and {sim.n_val} val frames to {out}")
    return EXIT_OK


def cmd_build_db(args, cfg: RunConfig) -> int:
    root = Path(args.split)
    _guard_train(root, "build the dense-object database")
    scenes = _load_scenes(root, cfg.db.margin, args.threads)
    db = build_database(scenes, cfg.db, meta={**cfg.stamp(), "split": split_tag(root) or "unknown"})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(save_db(db))
    _beside(cfg, out, False)
    n_obj = sum(len(p) for p in db.provenance.values())
    print(f"database: {len(db.entries)} bins from {len(scenes)} frames ({n_obj} source objects) -> {out}")
    return EXIT_OK


def cmd_enhance(args, cfg: RunConfig) -> int:
    root, out = Path(args.split), Path(args.out)
    db = load_db(Path(args.db).read_bytes())
    ids = _require_split(root)
    calib = CalibMatrices.standard()
    out.mkdir(parents=True, exist_ok=True)
    (out / "added").mkdir(exist_ok=True)
    tag = split_tag(root)
    (out / SPLIT_MARKER).write_text(f"{tag or 'train'} enhanced\n")

    def one(fid):
        scene = load_frame(root, fid, cfg.db.margin)
        enhanced = enhance_scene(scene, db)
        src_calib = root / "calib" / f"{fid}.txt"
        cal = read_calib(src_calib.read_text()) if src_calib.exists() else calib
        write_frame(out, fid, np.vstack([scene.all_points(), enhanced.added_points()]), scene.boxes, cal)
        (out / "added" / f"{fid}.bin").write_bytes(write_velodyne(enhanced.added_points()))
        cam = root / "camera" / f"{fid}.pftc"
        if cam.exists():
            (out / "camera").mkdir(exist_ok=True)
            (out / "camera" / f"{fid}.pftc").write_bytes(cam.read_bytes())
        return enhanced

    scenes = parallel_map(one, ids, args.threads)
    if args.ply:
        (out / "ply").mkdir(exist_ok=True)
        for s in scenes:
            (out / "ply" / f"{s.frame_id}.ply").write_text(scene_ply(s))
    if args.preview:
        from .plotting import bev_preview

        for s in scenes[: args.preview]:
            bev_preview(s, out / "preview" / f"{s.frame_id}.png", (cfg.bev.x_range, cfg.bev.y_range))
    _beside(cfg, out, True)
    n_add = sum(len(s.added_points()) for s in scenes)
    n_raw = sum(len(s.raw_points()) for s in scenes)
    print(f"enhanced {len(scenes)} frames: {n_raw} raw + {n_add} added points -> {out}")
    return EXIT_OK


def _report(out: Path, cfg: RunConfig, rows, per_class: Optional[dict], title: str) -> None:
    from .plotting import ap_bars, loss_curves

    (out / "log.tsv").write_text("epoch\tL_det\tL_sim\tmAP\n" + format_log(rows))
    loss_curves({title: rows}, out / "loss.png", title)
    if per_class is not None:
        metrics = _stamp_metrics(per_class)
        _write_json(out / "metrics.json", {**cfg.stamp(), **metrics})
        (out / "ap.tsv").write_text(_ap_table(per_class, cfg.bev.classes))
        ap_bars(per_class, out / "ap.png", title, metrics["overall"])


def cmd_train_assistant(args, cfg: RunConfig) -> int:
    root, out = Path(args.train), Path(args.out)
    _guard_train(root, "train the assistant")
    bev = cfg.bev
    samples = make_samples(_load_scenes(root, cfg.db.margin, args.threads), bev)
    val = make_samples(_load_scenes(Path(args.val), cfg.db.margin, args.threads), bev) if args.val else None
    snap, model, rows = train_assistant(samples, bev, cfg.train, val)
    per_class = evaluate(model, val, cfg.train)["per_class"] if val else None
    out.mkdir(parents=True, exist_ok=True)
    metrics = _stamp_metrics(per_class) if per_class is not None else {}
    (out / "assistant.pftc").write_bytes(save_checkpoint(model, "assistant", cfg.stamp(), rows, metrics,
                                                         cfg.train.assistant_kind))
    _report(out, cfg, rows, per_class, "assistant")
    _beside(cfg, out, True)
    print(format_log(rows[-1:]), end="")
    return EXIT_OK


def cmd_train_fusion(args, cfg: RunConfig) -> int:
    root, enh_root, out = Path(args.train), Path(args.train_enhanced), Path(args.out)
    _guard_train(root, "train the fusion detector")
    _guard_train(enh_root, "train the fusion detector")
    bev = cfg.bev
    snap = snapshot_from_checkpoint(Path(args.assistant).read_bytes(), bev)
    raw = _load_scenes(root, cfg.db.margin, args.threads)
    enh = _load_scenes(enh_root, cfg.db.margin, args.threads)
    ids = [s.frame_id for s in raw]
    if [s.frame_id for s in enh] != ids:
        raise DataError("raw and enhanced training splits hold different frames")
    samples = make_samples(raw, bev, _load_cameras(root, ids, cfg), enh)
    val = None
    if args.val:
        vroot = Path(args.val)
        vraw = _load_scenes(vroot, cfg.db.margin, args.threads)
        val = make_samples(vraw, bev, _load_cameras(vroot, [s.frame_id for s in vraw], cfg))
    model, rows = train_fusion(samples, snap, bev, cfg.train, val)
    per_class = evaluate(model, val, cfg.train, use_camera=True)["per_class"] if val else None
    out.mkdir(parents=True, exist_ok=True)
    metrics = _stamp_metrics(per_class) if per_class is not None else {}
    (out / "fusion.pftc").write_bytes(save_checkpoint(model, "fusion", cfg.stamp(), rows, metrics))
    _report(out, cfg, rows, per_class, f"{cfg.fusion.kind} fusion, lam={cfg.train.lam:g}")
    _beside(cfg, out, True)
    print(format_log(rows[-1:]), end="")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .plotting import ap_bars

    root, out = Path(args.split), Path(args.out)
    scenes = _load_scenes(root, cfg.db.margin, args.threads)
    ids = [s.frame_id for s in scenes]
    if (args.checkpoint is None) == (args.detections is None):
        raise ConfigError("evaluate needs exactly one of --checkpoint or --detections")
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        model, meta = load_checkpoint(Path(args.checkpoint).read_bytes(), cfg.bev)
        cams = _load_cameras(root, ids, cfg) if model.fusion is not None else None
        samples = make_samples(scenes, cfg.bev, cams)
        dets = [model.predict(s.lidar, s.camera, cfg.train.score_thr, cfg.train.nms_iou) for s in samples]
        (out / "detections").mkdir(exist_ok=True)
        for fid, d in zip(ids, dets):
            (out / "detections" / f"{fid}.txt").write_text(format_detections(d))
    else:
        ddir = Path(args.detections)
        if not ddir.is_dir():
            raise DataError(f"detection dump {ddir} is not a directory")
        dets = []
        for fid in ids:
            f = ddir / f"{fid}.txt"
            try:
                dets.append(parse_detections(f.read_text()) if f.exists() else [])
            except ValueError as exc:
                raise DataError(f"{f}: {exc}") from None
    per_class = evaluate_detections(dets, [s.boxes for s in scenes], cfg.bev.classes, dict(cfg.train.iou_thresholds))
    table = _ap_table(per_class, [c for c in cfg.bev.classes if c in per_class])
    (out / "ap.tsv").write_text(table)
    _write_json(out / "metrics.json", {**cfg.stamp(), **_stamp_metrics(per_class),
                                       "iou_thresholds": dict(cfg.train.iou_thresholds)})
    ap_bars(per_class, out / "ap.png", "AP@R40", map_overall(per_class) if per_class else 0.0)
    _beside(cfg, out, True)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import TOLERANCE, run_suite, summarize

    t0 = time.time()
    cases = run_suite(n_shapes=args.cases, seed=args.seed)
    report = summarize(cases)
    failed = [c for c in cases if not c.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.tsv").write_text(report)
        _beside(cfg, out, True)
    worst = max(c.error for c in cases)
    print(f"{len(cases) - len(failed)}/{len(cases)} cases below {TOLERANCE:g}, "
          f"worst {worst:.3e}, {time.time() - t0:.1f}s")
    if failed:
        print(summarize(failed), end="")
        raise CheckFailed(f"{len(failed)} gradient checks failed")
    return EXIT_OK


def cmd_export_ply(args, cfg: RunConfig) -> int:
    root, out = Path(args.split), Path(args.out)
    ids = _require_split(root)
    wanted = args.frame or ids
    missing = sorted(set(wanted) - set(ids))
    if missing:
        raise DataError(f"unknown frame(s) {', '.join(missing)} in {root}")
    if len(wanted) == 1 and out.suffix == ".ply":
        targets = [(wanted[0], out)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [(fid, out / f"{fid}.ply") for fid in wanted]
    for fid, path in targets:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(scene_ply(_scene_with_added(root, fid, cfg.db.margin)))
    _beside(cfg, out, out.suffix != ".ply")
    print(f"wrote {len(targets)} PLY file(s)")
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    """In-memory benchmark: synth, DB, enhancement, assistant, then the fusion x lam grid."""
    from .pipeline import assistant_gap, build_benchmark, supervision_grid
    from .plotting import grid_table, loss_curves

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_benchmark(cfg, args.threads)
    result = {**cfg.stamp()}
    snapshot = assistant_map = None
    if args.gap:
        gap = assistant_gap(bench)
        snapshot, assistant_map = gap["snapshot"], gap["enhanced"]["overall"]
        result["assistant_gap"] = {"gap": gap["gap"]}
        for k in ("enhanced", "raw"):
            result["assistant_gap"][k] = {"overall": gap[k]["overall"], "per_class": gap[k]["per_class"]}
        loss_curves({"enhanced": gap["enhanced"]["log"], "raw": gap["raw"]["log"]}, out / "assistant_loss.png",
                    "assistant: enhanced vs raw")
        print(f"assistant gap: enhanced {gap['enhanced']['overall']:.4f} raw {gap['raw']['overall']:.4f}")
    kinds = [k for k in args.kinds.split(",") if k]
    lams = [float(x) for x in args.lams.split(",") if x]
    if kinds:
        grid = supervision_grid(bench, kinds, lams, snapshot, assistant_map)
        lines = ["fusion\tlam\tL_sim\tmAP"]
        table = {}
        for (kind, lam), r in grid["runs"].items():
            lines.append(f"{kind}\t{lam:g}\t{r['L_sim']:.6f}\t{r['overall']:.6f}")
            table.setdefault(kind, {})[f"lam={lam:g}"] = r["overall"]
        (out / "grid.tsv").write_text("\n".join(lines) + "\n")
        grid_table(table, out / "grid.png")
        loss_curves({f"{k} lam={l:g}": r["log"] for (k, l), r in grid["runs"].items()}, out / "grid_loss.png",
                    "fusion runs")
        result["assistant_mAP"] = grid.get("assistant")
        result["grid"] = [{"fusion": k, "lam": l, "L_sim": r["L_sim"], "mAP": r["overall"],
                           "per_class": r["per_class"]} for (k, l), r in grid["runs"].items()]
        print("\n".join(lines))
    _write_json(out / "bench.json", result)
    _beside(cfg, out, True)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable; flags win over the file)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: available CPUs; 1 = deterministic reference path)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="polarfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic KITTI-format train/val splits")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-db", parents=[common], help="training split -> dense-object database")
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("enhance", parents=[common], help="paste dense objects into every scene of a split")
    s.add_argument("--split", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ply", action="store_true", help="also write PLY previews (added points magenta)")
    s.add_argument("--preview", type=int, default=0, metavar="N", help="PNG previews of the first N frames")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("train-assistant", parents=[common], help="LiDAR-only detector on an enhanced split")
    s.add_argument("--train", required=True, help="enhanced training split")
    s.add_argument("--val", help="enhanced validation split for the final mAP")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_assistant)

    s = sub.add_parser("train-fusion", parents=[common], help="fusion detector with feature supervision")
    s.add_argument("--train", required=True, help="raw training split (with camera grids)")
    s.add_argument("--train-enhanced", required=True, help="enhanced copy of the training split")
    s.add_argument("--assistant", required=True, help="assistant checkpoint")
    s.add_argument("--val", help="raw validation split")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_fusion)

    s = sub.add_parser("evaluate", parents=[common], help="per-class AP@R40 for a checkpoint or detection dump")
    s.add_argument("--split", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--detections", help="directory of per-frame detection text files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--cases", type=int, default=20, help="random shapes per op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-ply", parents=[common], help="PLY export; added points colored magenta")
    s.add_argument("--split", required=True)
    s.add_argument("--frame", action="append", help="frame id (repeatable; default all)")
    s.add_argument("--out", required=True, help=".ply file for one frame, else a directory")
    s.set_defaults(func=cmd_export_ply)

    s = sub.add_parser("bench", parents=[common], help="in-memory assistant gap and fusion x supervision grid")
    s.add_argument("--out", required=True)
    s.add_argument("--kinds", default="sum,concat,deep", help="comma-separated fusion kinds ('' to skip)")
    s.add_argument("--lams", default="0,1", help="comma-separated lam values")
    s.add_argument("--gap", action="store_true", help="also train enhanced and raw LiDAR-only detectors")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit 2 here
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    try:
        cfg = C.load_config(args.config, args.overrides)
        return args.func(args, cfg)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, KittiFormatError, DbFormatError, ContainerError, ShapeMismatch, NoDonor, EmptyObject,
            PlacementFailure, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergedLoss, NonFiniteError, CheckFailed) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
