"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criteria 5 and 6 train on the benchmark config (200 train / 50 val scenes) for
three seeds and take about a quarter of an hour on one CPU core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from polarfuse.cli import EXIT_DATA, EXIT_OK, main
from polarfuse.config import load_config
from polarfuse.geometry import polar_index_of
from polarfuse.gradcheck import TOLERANCE, run_suite
from polarfuse.kitti import read_velodyne, write_velodyne
from polarfuse.metrics import ap_r40, bev_iou
from polarfuse.pasting import enhance_scene
from polarfuse.pipeline import assistant_gap, build_benchmark, median, supervision_grid
from polarfuse.sampling_db import DbConfig, build_database, group_objects, load_db, save_db
from polarfuse.simulator import SimConfig, generate_scene
from test_metrics import IOU_CASES, oracle_ap, random_instance
from test_pasting import added_within_scaled_margin

BENCH_CONFIG = Path(__file__).parents[1] / "configs" / "benchmark.yaml"
SEEDS = (0, 1, 2)
TINY = ["--threads", "1", "--set", "sim.n_train=6", "--set", "sim.n_val=3", "--set", "train.epochs=1"]


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def seed_overrides(seed):
    return [f"sim.seed={seed}", f"db.seed={seed}", f"train.seed={seed}"]


def test_1_desk_scale_statement(capsys):
    readme = (Path(__file__).parents[1] / "README.md").read_text()
    ok = "not reproducible at desk scale" in readme
    report(capsys, 1, ok, "README states that full-scale KITTI/nuScenes detector results are out of reach "
                          "and the synthetic oracle suites stand in for them")


def test_2_gradient_suite(capsys):
    t0 = time.time()
    cases = run_suite(n_shapes=20, seed=0)
    elapsed = time.time() - t0
    worst = max(c.error for c in cases)
    ops = {c.name for c in cases}
    ok = all(c.passed for c in cases) and elapsed < 60 and {"composed_deep", "bce_normalized", "masked_l1"} <= ops
    report(capsys, 2, ok, f"{sum(c.passed for c in cases)}/{len(cases)} cases over {len(ops)} ops, "
                          f"worst rel err {worst:.2e} (< {TOLERANCE:g}), {elapsed:.1f}s (< 60s)")


def test_3_polar_sampling_invariants(capsys):
    t0 = time.time()
    sim = SimConfig(n_train=50, n_val=0, seed=21)
    scenes = [generate_scene(sim, i)[0] for i in range(50)]
    cfg = DbConfig()
    db = build_database(scenes, cfg)
    blob = save_db(db)
    deterministic = blob == save_db(build_database(scenes, cfg))
    additive = inside = True
    for scene in scenes:
        out = enhance_scene(scene, db)
        additive &= out.raw_points().tobytes() == scene.raw_points().tobytes()
        for obj, added in zip(scene.objects, out.added):
            inside &= added_within_scaled_margin(db, scenes, obj, added, cfg.margin)
    lookup = {(s.frame_id, i): o for s in scenes for i, o in enumerate(s.objects)}
    provenance = all(polar_index_of(lookup[src].box, cfg.N) == key
                     for key, sources in db.provenance.items() for src in sources)
    one_bin = group_objects(scenes, 1)
    single = len(one_bin) == len({k.class_label for k in one_bin}) and all(
        k.dir_bin == 0 and k.rot_bin == 0 for k in one_bin)
    elapsed = time.time() - t0
    ok = additive and inside and deterministic and provenance and single and elapsed < 60
    report(capsys, 3, ok, f"additive={additive} in_box={inside} byte_deterministic={deterministic} "
                          f"provenance={provenance} N1_single_bin={single}, {elapsed:.1f}s (< 60s)")


def test_4_metric_oracle(capsys):
    mismatched = [s for s in range(200) if ap_r40(*random_instance(s), 0.5) != oracle_ap(*random_instance(s), 0.5)]
    errs = [abs(bev_iou(a, b) - want) for _, a, b, want in IOU_CASES]
    ok = not mismatched and max(errs) <= 1e-9 and len(IOU_CASES) >= 10
    report(capsys, 4, ok, f"ap_r40 equals the enumeration oracle on {200 - len(mismatched)}/200 instances; "
                          f"{len(IOU_CASES)} hand IoU cases, max error {max(errs):.1e} (<= 1e-9)")


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Per seed: assistant gap and deep fusion at lam 0/1. Seed 0 runs the whole
    sum/concat/deep x lam grid through the CLI from the config file alone."""
    out = {"gap": {}, "deep": {}, "gap_seconds": 0.0, "grid_seconds": 0.0}
    d = tmp_path_factory.mktemp("bench")
    t0 = time.time()
    code = main(["bench", "--config", str(BENCH_CONFIG), "--threads", "1", "--out", str(d), "--gap",
                 *sum((["--set", o] for o in seed_overrides(0)), [])])
    out["cli_code"] = code
    res = json.loads((d / "bench.json").read_text())
    out["grid"] = res["grid"]
    out["gap"][0] = (res["assistant_gap"]["enhanced"]["overall"], res["assistant_gap"]["raw"]["overall"])
    out["deep"][0] = {r["lam"]: (r["L_sim"], r["mAP"]) for r in res["grid"] if r["fusion"] == "deep"}
    out["grid_seconds"] += time.time() - t0
    for seed in SEEDS[1:]:
        cfg = load_config(str(BENCH_CONFIG), seed_overrides(seed))
        t1 = time.time()
        bench = build_benchmark(cfg)
        gap = assistant_gap(bench)
        t2 = time.time()
        grid = supervision_grid(bench, ("deep",), (0.0, 1.0), gap["snapshot"], gap["enhanced"]["overall"])
        out["gap_seconds"] += t2 - t1
        out["grid_seconds"] += time.time() - t1
        out["gap"][seed] = (gap["enhanced"]["overall"], gap["raw"]["overall"])
        out["deep"][seed] = {lam: (r["L_sim"], r["overall"]) for (_, lam), r in grid["runs"].items()}
    # seed 0's gap share, measured the same way on the in-memory path, for the runtime budget
    out["gap_seconds"] *= len(SEEDS) / (len(SEEDS) - 1)
    return out


def test_5_assistant_gap(benchmark, capsys):
    gaps = {s: 100 * (e - r) for s, (e, r) in benchmark["gap"].items()}
    med = median(list(gaps.values()))
    detail = ", ".join(f"seed {s}: {100 * e:.1f} vs {100 * r:.1f}" for s, (e, r) in benchmark["gap"].items())
    ok = med >= 10.0 and benchmark["gap_seconds"] < 600
    report(capsys, 5, ok, f"enhanced vs raw mAP@R40 {detail}; median gap {med:.1f} points (>= 10), "
                          f"~{benchmark['gap_seconds']:.0f}s for 3 seeds (< 600s)")


def test_6_supervision_helps(benchmark, capsys):
    deep = benchmark["deep"]
    sim0, sim1 = median([deep[s][0.0][0] for s in SEEDS]), median([deep[s][1.0][0] for s in SEEDS])
    map0, map1 = median([deep[s][0.0][1] for s in SEEDS]), median([deep[s][1.0][1] for s in SEEDS])
    cells = {(r["fusion"], r["lam"]) for r in benchmark["grid"]}
    full_grid = benchmark["cli_code"] == EXIT_OK and cells == {(k, l) for k in ("sum", "concat", "deep")
                                                               for l in (0.0, 1.0)}
    ok = sim1 < sim0 and map1 >= map0 and full_grid and benchmark["grid_seconds"] < 1800
    report(capsys, 6, ok, f"deep fusion medians: L_sim {sim0:.4f} (lam 0) -> {sim1:.4f} (lam 1), "
                          f"mAP {100 * map0:.1f} -> {100 * map1:.1f}; 3x2 grid from config: {full_grid}; "
                          f"{benchmark['grid_seconds']:.0f}s (< 1800s)")


def test_7_ablation_switches(tmp_path, capsys):
    runs = [[f"fusion.K={k}"] for k in (1, 2, 3, 4)] + [[f"db.N={n}"] for n in (1, 4, 8, 16)] + \
           [[f"train.sim_loss={s}"] for s in ("L1", "L2")]
    done = []
    for k, sets in enumerate(runs):
        code = main(["bench", "--out", str(tmp_path / str(k)), "--kinds", "deep", "--lams", "1", *TINY,
                     *sum((["--set", s] for s in sets), [])])
        ok_run = code == EXIT_OK and np.isfinite(json.loads((tmp_path / str(k) / "bench.json").read_text())
                                                  ["grid"][0]["L_sim"])
        done.append((sets[0], ok_run))
    ok = all(r for _, r in done)
    report(capsys, 7, ok, f"{sum(r for _, r in done)}/{len(done)} ablation runs completed: "
                          + " ".join(s for s, _ in done))


def test_8_io_round_trips(tmp_path, capsys):
    rng = np.random.default_rng(8)
    velo = True
    for _ in range(20):
        pts = rng.standard_normal((int(rng.integers(0, 500)), 4)).astype(np.float32) * 30
        velo &= read_velodyne(write_velodyne(pts)).tobytes() == pts.tobytes()
    sim = SimConfig(n_train=8, n_val=0, seed=int(rng.integers(1000)))
    scenes = [generate_scene(sim, i)[0] for i in range(8)]
    db = build_database(scenes, DbConfig(N=4, seed=3), meta={"split": "train"})
    back = load_db(save_db(db))
    dbs = save_db(back) == save_db(db) and back.provenance == db.provenance and all(
        back.entries[k].points.tobytes() == v.points.tobytes() for k, v in db.entries.items())
    code = main(["synth", "--out", str(tmp_path / "d"), *TINY])
    refused = main(["build-db", "--split", str(tmp_path / "d/val"), "--out", str(tmp_path / "x.pfdb"), *TINY])
    guard = code == EXIT_OK and refused == EXIT_DATA and not (tmp_path / "x.pfdb").exists()
    ok = velo and dbs and guard
    report(capsys, 8, ok, f"velodyne bit-exact={velo} db bit-exact={dbs} build-db refuses val split={guard}")
