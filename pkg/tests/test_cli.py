import csv
import shutil

import numpy as np
import pytest

from kinseg import __version__
from kinseg.cli import EXIT_CONFIG, EXIT_DATA, load_config, main
from kinseg.dataset import load_dataset, load_image, load_mask, read_trace_csv, read_transform

CONFIG = """\
seed = 5
[simulate]
frames = 2
test_frames = 2
[calibrate]
iters = 3
[train]
epochs = 15
"""


def kinseg(*argv):
    with pytest.raises(SystemExit) as exc:
        main([str(a) for a in argv])
    return exc.value.code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(CONFIG)
    ds, run = root / "ds", root / "run"
    assert kinseg("simulate", "--config", cfg, "--out", ds) == 0
    assert kinseg("calibrate", "--config", cfg, "--dataset", ds, "--run", run, "--eval-gt") == 0
    assert kinseg("train", "--config", cfg, "--dataset", ds, "--run", run) == 0
    assert kinseg("infer", "--config", cfg, "--dataset", ds, "--run", run) == 0
    assert kinseg("eval", "--config", cfg, "--dataset", ds, "--run", run) == 0
    return root, cfg, ds, run


def test_version(capsys):
    assert kinseg("version") == 0
    assert __version__ in capsys.readouterr().out


def test_default_config_matches_reference_split():
    cfg = load_config(None)
    assert cfg["simulate"]["frames"] == 19 and cfg["simulate"]["test_frames"] == 30
    assert cfg["calibrate"]["iters"] == 300 and cfg["seed"] == 0


def test_pipeline_artifacts(pipeline):
    _, _, ds, run = pipeline
    read_transform(run / "T_star.txt")
    trace = read_trace_csv(run / "trace.csv")
    assert len(trace) == 3 and "gt_iou" in trace[0]
    assert sorted(p.name for p in (run / "labels").iterdir()) == ["0000.png", "0001.png"]
    assert (run / "model.bin").exists()
    loss_rows = (run / "model_loss.csv").read_text().splitlines()
    assert loss_rows[0] == "epoch,loss" and len(loss_rows) == 16
    for name in ("0002.png", "0003.png"):
        img = load_image(ds / "images" / name)
        assert load_image(run / "overlay" / name).shape == img.shape
        assert load_mask(run / "pred" / name).shape == img.shape[:2]
    with open(run / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["SSTS", "Grabcut"]
    assert all(0 <= float(r[c]) <= 1 for r in rows for c in ("accuracy", "iou", "recall", "precision"))


def test_crf_infer_and_gt_predictions(pipeline):
    _, cfg, ds, run = pipeline
    assert kinseg("infer", "--config", cfg, "--dataset", ds, "--run", run, "--crf") == 0
    assert (run / "pred_crf" / "0002.png").exists() and (run / "overlay_crf" / "0003.png").exists()
    out = run / "gt_eval.csv"
    assert kinseg("eval", "--config", cfg, "--dataset", ds, "--run", run, "--pred", ds / "gt", "--out", out) == 0
    with open(out) as fh:
        row = next(csv.DictReader(fh))
    assert row["method"] == "predictions"
    assert all(float(row[c]) == 1.0 for c in ("accuracy", "iou", "recall", "precision"))


def test_fsl_training_from_gt_labels(pipeline):
    _, cfg, ds, run = pipeline
    fsl = run / "fsl.bin"
    assert kinseg("train", "--config", cfg, "--dataset", ds, "--run", run, "--labels", "gt",
                  "--model", fsl, "--epochs", 5) == 0
    assert fsl.exists() and len((run / "fsl_loss.csv").read_text().splitlines()) == 6
    out = run / "three.csv"
    assert kinseg("eval", "--config", cfg, "--dataset", ds, "--run", run, "--fsl-model", fsl, "--out", out) == 0
    with open(out) as fh:
        assert [r["method"] for r in csv.DictReader(fh)] == ["SSTS", "FSL", "Grabcut"]


def test_infer_deterministic(pipeline, tmp_path):
    _, cfg, ds, run = pipeline
    assert kinseg("infer", "--config", cfg, "--dataset", ds, "--run", run, "--out", tmp_path / "again") == 0
    for p in (run / "pred").iterdir():
        assert (tmp_path / "again" / p.name).read_bytes() == p.read_bytes()


def test_grabcut_debug_dump(pipeline, tmp_path):
    _, cfg, ds, run = pipeline
    dbg = tmp_path / "dbg"
    assert kinseg("eval", "--config", cfg, "--dataset", ds, "--run", run, "--out", tmp_path / "e.csv",
                  "--grabcut-debug", dbg) == 0
    names = sorted(p.name for p in dbg.iterdir())
    assert "0002_trimap.png" in names and "0002_energy.csv" in names


def test_single_frame_and_single_iteration(tmp_path):
    ds = tmp_path / "one"
    assert kinseg("simulate", "--out", ds, "--frames", 1, "--test-frames", 0, "--seed", 1) == 0
    assert len(load_dataset(ds).frames) == 1
    assert kinseg("calibrate", "--dataset", ds, "--run", tmp_path / "r", "--iters", 1) == 0
    assert len(read_trace_csv(tmp_path / "r" / "trace.csv")) == 1


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [")
    assert kinseg("simulate", "--config", bad, "--out", tmp_path / "x") == EXIT_CONFIG
    bad.write_text("[calibrate]\nwarp = 9\n")
    assert kinseg("simulate", "--config", bad, "--out", tmp_path / "x") == EXIT_CONFIG
    bad.write_text("[train]\nlearning_rate = -1\n")
    assert kinseg("simulate", "--config", bad, "--out", tmp_path / "x") == EXIT_CONFIG
    bad.write_text("seed = -3\n")
    assert kinseg("simulate", "--config", bad, "--out", tmp_path / "x") == EXIT_CONFIG
    assert kinseg("simulate", "--config", tmp_path / "nope.toml", "--out", tmp_path / "x") == EXIT_CONFIG


def test_data_errors(pipeline, tmp_path, capsys):
    _, cfg, ds, _ = pipeline
    assert kinseg("calibrate", "--dataset", tmp_path / "missing", "--run", tmp_path / "r") == EXIT_DATA
    fresh = tmp_path / "fresh"
    assert kinseg("train", "--config", cfg, "--dataset", ds, "--run", fresh) == EXIT_DATA
    assert "kinseg calibrate" in capsys.readouterr().err
    broken = tmp_path / "ds"
    shutil.copytree(ds, broken)
    (broken / "joints.txt").unlink()
    assert kinseg("calibrate", "--config", cfg, "--dataset", broken, "--run", tmp_path / "r2") == EXIT_DATA


def test_eval_dimension_mismatch(pipeline, tmp_path, capsys):
    _, cfg, ds, run = pipeline
    preds = tmp_path / "small"
    preds.mkdir()
    from kinseg.dataset import save_mask

    for name in ("0002.png", "0003.png"):
        save_mask(preds / name, np.zeros((10, 10), bool))
    code = kinseg("eval", "--config", cfg, "--dataset", ds, "--run", run, "--pred", preds,
                  "--out", tmp_path / "e.csv")
    assert code == EXIT_DATA and "dimension" in capsys.readouterr().err
