import hashlib
import json
import subprocess
import sys

import pytest

from pneumoseg import cli
from pneumoseg.training import TrainingError
from pneumoseg.volume_io import load_mask, read_manifest

TINY_FLAGS = ["--image-size", "32", "--patch-size", "0", "--batch-size", "4", "--max-epochs", "1",
              "--windows-per-epoch", "4", "--val-windows", "2"]


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("network.dense_layers = 2\nnetwork.dense_growth = 4\nnetwork.lstm_hidden = 4\n"
                    "network.head_channels = 4\nlr0 = 0.5\n")
    return path


def test_synth_is_byte_identical(tmp_path):
    assert cli.main(["synth", "--n", "10", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--n", "10", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    for name in ("manifest.tsv", "truth.csv", "P000.vol", "P009.mask"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = json.loads((tmp_path / "a" / "run_meta.json").read_text())
    assert meta["command"] == "synth" and meta["code_version"]


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main(["train"]) == 2
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["quantify", "--mask", str(tmp_path / "m.mask"), "--out", str(tmp_path / "q.csv")]) in (2, 3)


def test_data_errors_exit_3(tmp_path, small_cohort):
    assert cli.main(["train", "--data", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["predict", "--weights", str(tmp_path / "none"), "--volume", str(tmp_path / "v"),
                     "--out", str(tmp_path / "m.mask")]) == 3
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\tb\n")
    assert cli.main(["crossval", "--data", str(bad), "--out", str(tmp_path / "cv")]) == 3


def test_numeric_failure_exit_4(tmp_path, small_cohort, monkeypatch):
    def boom(*a, **k):
        raise TrainingError("fold 0 epoch 1 batch 0: non-finite loss nan")
    monkeypatch.setattr(cli, "train_fold", boom)
    code = cli.main(["train", "--data", str(small_cohort.manifest_path), "--out", str(tmp_path / "t"),
                     "--val-size", "1", "--test-size", "1"])
    assert code == 4


def test_train_predict_quantify_evaluate(tmp_path, small_cohort):
    before = _digest(small_cohort.manifest_path.parent)
    cfg = _tiny_cfg(tmp_path)
    out = tmp_path / "train"
    code = cli.main(["train", "--config", str(cfg), "--data", str(small_cohort.manifest_path),
                     "--out", str(out), "--val-size", "1", "--test-size", "2", "--lr0", "0.01", *TINY_FLAGS])
    assert code == 0
    meta = json.loads((out / "run_meta.json").read_text())
    resolved = meta["resolved_config"]
    assert resolved["network"]["lstm_hidden"] == 4
    assert resolved["train"]["lr0"] == 0.01          # flag beats config file
    assert (out / "model.weights").is_file() and (out / "history.csv").is_file()
    assert (out / "history.png").stat().st_size > 0
    assert len(list((out / "predictions").glob("*.mask"))) == 2

    pid, vol_path, _ = small_cohort.records[0]
    pred = tmp_path / "pred" / f"{pid}.mask"
    assert cli.main(["predict", "--weights", str(out / "model.weights"), "--volume", str(vol_path),
                     "--out", str(pred)]) == 0
    assert load_mask(pred).shape == (8, 48, 48)
    q = tmp_path / "q.csv"
    assert cli.main(["quantify", "--mask", str(pred), "--volume", str(vol_path), "--out", str(q)]) == 0
    assert q.read_text().splitlines()[1].startswith(pid + ",")

    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--pred", str(out / "predictions"), "--gt", str(small_cohort.manifest_path),
                     "--out", str(ev), "--subset"]) == 0
    assert (ev / "summary.json").is_file() and (ev / "scatter_ggo.png").is_file()
    assert _digest(small_cohort.manifest_path.parent) == before


def test_evaluate_same_dir_gives_perfect_dice(tmp_path, small_cohort):
    folder = small_cohort.manifest_path.parent
    assert cli.main(["evaluate", "--pred", str(folder), "--gt", str(folder), "--out", str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["lesion_dice"]["across_patients"]["mean"] == 1.0
    assert (tmp_path / "e" / "ba_ggo.png").is_file()


def test_evaluate_missing_prediction_is_data_error(tmp_path, small_cohort):
    (tmp_path / "empty").mkdir()
    assert cli.main(["evaluate", "--pred", str(tmp_path / "empty"), "--gt", str(small_cohort.manifest_path),
                     "--out", str(tmp_path / "e")]) == 3


def test_crossval_idempotent(tmp_path, small_cohort):
    cfg = _tiny_cfg(tmp_path)
    args = ["crossval", "--config", str(cfg), "--data", str(small_cohort.manifest_path), "--k", "4",
            "--val-size", "1", *TINY_FLAGS]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ["folds.json"] + [f"fold{k}_history.csv" for k in range(4)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for pid in read_manifest(small_cohort.manifest_path).patient_ids:
        a = (tmp_path / "a" / "predictions" / f"{pid}.mask").read_bytes()
        assert a == (tmp_path / "b" / "predictions" / f"{pid}.mask").read_bytes()


def test_bench_command(tmp_path):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--models", "unet2d", "--n-slices", "2", "--repetitions", "1",
                     "--image-size", "32", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["results"][0]["model"] == "unet2d" and "machine" in doc


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pneumoseg", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
