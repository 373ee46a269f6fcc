import json

import numpy as np
import pytest

from polarfuse.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from polarfuse.config import CONFIG_FILENAME
from polarfuse.kitti import read_velodyne
from polarfuse.sampling_db import load_db

TINY = ["--threads", "1", "--set", "sim.n_train=6", "--set", "sim.n_val=3", "--set", "train.epochs=1",
        "--set", "db.N=4"]


def run(*args):
    return main([*args, *TINY])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """synth -> build-db -> enhance -> train-assistant -> train-fusion on a tiny config."""
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", str(d / "data")) == EXIT_OK
    assert run("build-db", "--split", str(d / "data/train"), "--out", str(d / "db.pfdb")) == EXIT_OK
    for split in ("train", "val"):
        assert run("enhance", "--split", str(d / "data" / split), "--db", str(d / "db.pfdb"),
                   "--out", str(d / f"enh_{split}"), "--ply", "--preview", "1") == EXIT_OK
    assert run("train-assistant", "--train", str(d / "enh_train"), "--val", str(d / "enh_val"),
               "--out", str(d / "assistant")) == EXIT_OK
    assert run("train-fusion", "--train", str(d / "data/train"), "--train-enhanced", str(d / "enh_train"),
               "--assistant", str(d / "assistant/assistant.pftc"), "--val", str(d / "data/val"),
               "--out", str(d / "fusion")) == EXIT_OK
    return d


def test_outputs_present(work):
    for rel in ["data/train/velodyne/000000.bin", "data/val/label_2/000006.txt", "data/manifest.json",
                "db.pfdb", "db.pfdb.config.yaml", "enh_train/added/000000.bin", "enh_train/ply/000000.ply",
                "enh_train/preview/000000.png", "assistant/assistant.pftc", "assistant/log.tsv",
                "assistant/loss.png", "assistant/ap.png", "fusion/fusion.pftc", "fusion/metrics.json"]:
        assert (work / rel).exists(), rel
    for rel in ["data", "enh_train", "assistant", "fusion"]:
        assert (work / rel / CONFIG_FILENAME).exists()


def test_enhanced_frames_are_additive(work):
    raw = read_velodyne((work / "data/train/velodyne/000001.bin").read_bytes())
    enh = read_velodyne((work / "enh_train/velodyne/000001.bin").read_bytes())
    np.testing.assert_array_equal(enh[: len(raw)], raw)


def test_db_carries_stamp(work):
    db = load_db((work / "db.pfdb").read_bytes())
    assert db.meta["split"] == "train" and "config_hash" in db.meta


def test_rerun_is_byte_identical(work, tmp_path):
    assert run("build-db", "--split", str(work / "data/train"), "--out", str(tmp_path / "db.pfdb")) == EXIT_OK
    assert (tmp_path / "db.pfdb").read_bytes() == (work / "db.pfdb").read_bytes()
    assert run("train-assistant", "--train", str(work / "enh_train"), "--val", str(work / "enh_val"),
               "--out", str(tmp_path / "a")) == EXIT_OK
    for name in ["assistant.pftc", "log.tsv", "metrics.json", "ap.tsv", "ap.png", "loss.png"]:
        assert (tmp_path / "a" / name).read_bytes() == (work / "assistant" / name).read_bytes(), name


def test_threads_do_not_change_output(work, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), *TINY, "--threads", "3"]) == EXIT_OK
    for rel in ["train/velodyne/000002.bin", "val/label_2/000007.txt", "train/camera/000003.pftc"]:
        assert (tmp_path / "d" / rel).read_bytes() == (work / "data" / rel).read_bytes()


def test_build_db_refuses_val(work, tmp_path, capsys):
    code = run("build-db", "--split", str(work / "data/val"), "--out", str(tmp_path / "x.pfdb"))
    assert code == EXIT_DATA
    assert "training set only" in capsys.readouterr().err
    assert not (tmp_path / "x.pfdb").exists()


def test_evaluate_checkpoint(work, tmp_path):
    assert run("evaluate", "--split", str(work / "data/val"), "--checkpoint", str(work / "fusion/fusion.pftc"),
               "--out", str(tmp_path / "ev")) == EXIT_OK
    metrics = json.loads((tmp_path / "ev/metrics.json").read_text())
    assert 0.0 <= metrics["overall"] <= 1.0 and (tmp_path / "ev/detections/000006.txt").exists()


def test_evaluate_empty_dump(work, tmp_path, capsys):
    (tmp_path / "dump").mkdir()
    assert run("evaluate", "--split", str(work / "data/val"), "--detections", str(tmp_path / "dump"),
               "--out", str(tmp_path / "ev")) == EXIT_OK
    metrics = json.loads((tmp_path / "ev/metrics.json").read_text())
    assert metrics["overall"] == 0.0 and all(v == 0.0 for v in metrics["per_class"].values())


def test_evaluate_refuses_other_bev(work, tmp_path):
    code = main(["evaluate", "--split", str(work / "data/val"), "--checkpoint", str(work / "fusion/fusion.pftc"),
                 "--out", str(tmp_path / "ev"), *TINY, "--set", "bev.cell=0.5"])
    assert code == EXIT_CONFIG


def test_export_ply(work, tmp_path):
    assert run("export-ply", "--split", str(work / "enh_train"), "--frame", "000000",
               "--out", str(tmp_path / "f.ply")) == EXIT_OK
    assert (tmp_path / "f.ply").read_text().startswith("ply")
    assert run("export-ply", "--split", str(work / "enh_train"), "--frame", "999999",
               "--out", str(tmp_path / "g.ply")) == EXIT_DATA


def test_gradcheck_exit_zero(tmp_path):
    assert main(["gradcheck", "--cases", "2", "--out", str(tmp_path)]) == EXIT_OK
    assert "FAIL" not in (tmp_path / "gradcheck.tsv").read_text()


def test_config_errors(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--set", "sim.bogus=1"]) == EXIT_CONFIG
    assert main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG


def test_unknown_flag_is_fatal():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", "x", "--frobnicate"])
    assert exc.value.code == 2


def test_missing_split(tmp_path):
    assert run("enhance", "--split", str(tmp_path / "nope"), "--db", str(tmp_path / "db"),
               "--out", str(tmp_path / "o")) == EXIT_DATA


def test_bench_grid_from_config(tmp_path):
    assert main(["bench", "--out", str(tmp_path), *TINY, "--kinds", "sum,deep", "--lams", "0,1", "--gap"]) == EXIT_OK
    result = json.loads((tmp_path / "bench.json").read_text())
    assert len(result["grid"]) == 4 and "gap" in result["assistant_gap"]
    assert (tmp_path / "grid.png").exists() and (tmp_path / "grid.tsv").read_text().count("\n") == 5
