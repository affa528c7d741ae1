import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from voxuq.cli import main

SMALL_CONFIG = """
[world]
grid_x = 8
grid_y = 8
grid_z = 2
num_classes = 5
feature_dim = 8
objects_min = 3
objects_max = 3
train_scenes = 8
val_scenes = 2
test_scenes = 4
seed = 7

[training]
epochs = 2
"""


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, runner):
    """Dataset + trained artifacts shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.ini"
    config.write_text(SMALL_CONFIG)
    data = root / "data"
    r = runner.invoke(main, ["generate-data", "--config", str(config),
                             "--out", str(data)])
    assert r.exit_code == 0, r.output
    models = root / "models"
    r = runner.invoke(main, ["train", "--data", str(data), "--config", str(config),
                             "--out", str(models), "--seed", "7",
                             "--ensemble", "2"])
    assert r.exit_code == 0, r.output
    gda = models / "gda.ocuq"
    r = runner.invoke(main, ["fit-gmm", "--data", str(data),
                             "--head", str(models / "head.ocuq"),
                             "--out", str(gda), "--seed", "7"])
    assert r.exit_code == 0, r.output
    return {"root": root, "config": config, "data": data, "models": models,
            "gda": gda}


def test_generate_data_writes_splits(workspace):
    for split in ("train", "val", "test"):
        d = workspace["data"] / split
        assert (d / "manifest.json").exists()
        assert (d / "features.bin").exists()
        assert (d / "labels.bin").exists()


def test_generate_data_refuses_nonempty_out(workspace, runner):
    r = runner.invoke(main, ["generate-data", "--config", str(workspace["config"]),
                             "--out", str(workspace["data"])])
    assert r.exit_code == 2
    assert "--force" in r.output


def test_unknown_config_section_exit_2(runner, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[planet]\ngravity = 9.8\n")
    r = runner.invoke(main, ["generate-data", "--config", str(bad),
                             "--out", str(tmp_path / "d")])
    assert r.exit_code == 2
    assert "planet" in r.output


def test_unknown_config_key_exit_2(runner, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[world]\nwarp_factor = 5\n")
    r = runner.invoke(main, ["generate-data", "--config", str(bad),
                             "--out", str(tmp_path / "d")])
    assert r.exit_code == 2
    assert "warp_factor" in r.output


def test_bad_config_value_exit_2(runner, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[world]\nnum_classes = many\n")
    r = runner.invoke(main, ["generate-data", "--config", str(bad),
                             "--out", str(tmp_path / "d")])
    assert r.exit_code == 2


def test_train_outputs(workspace):
    models = workspace["models"]
    assert (models / "head.ocuq").exists()
    assert (models / "member_0.ocuq").exists()
    assert (models / "member_1.ocuq").exists()
    log = (models / "train_log.csv").read_text().strip().split("\n")
    assert log[0] == "epoch,loss,accuracy"
    assert len(log) == 3  # header + 2 epochs


def test_fit_gmm_missing_head_exit_2(workspace, runner):
    r = runner.invoke(main, ["fit-gmm", "--data", str(workspace["data"]),
                             "--head", str(workspace["root"] / "nope.ocuq"),
                             "--out", str(workspace["root"] / "g.ocuq")])
    assert r.exit_code == 2


def test_fit_gmm_missing_class_exit_3(runner, tmp_path):
    # many classes but almost no objects: some class never appears
    config = tmp_path / "sparse.ini"
    config.write_text("""
[world]
grid_x = 8
grid_y = 8
grid_z = 2
num_classes = 13
feature_dim = 8
objects_min = 1
objects_max = 1
train_scenes = 2
val_scenes = 1
test_scenes = 1
seed = 3

[training]
epochs = 1
""")
    data = tmp_path / "data"
    r = runner.invoke(main, ["generate-data", "--config", str(config),
                             "--out", str(data)])
    assert r.exit_code == 0, r.output
    models = tmp_path / "models"
    r = runner.invoke(main, ["train", "--data", str(data), "--config", str(config),
                             "--out", str(models)])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["fit-gmm", "--data", str(data),
                             "--head", str(models / "head.ocuq"),
                             "--out", str(tmp_path / "g.ocuq")])
    assert r.exit_code == 3
    assert "error" in r.output


def test_eval_ood_writes_reports(workspace, runner):
    out = workspace["root"] / "bench"
    r = runner.invoke(main, ["eval-ood", "--data", str(workspace["data"]),
                             "--head", str(workspace["models"] / "head.ocuq"),
                             "--gda", str(workspace["gda"]),
                             "--members", str(workspace["models"]),
                             "--methods", "ours,max-softmax,de:n=2",
                             "--corruptions", "noise,fog",
                             "--severities", "1,3",
                             "--out", str(out), "--seed", "7"])
    assert r.exit_code == 0, r.output
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["methods"]) == {"ours", "max-softmax", "de:n=2"}
    assert set(doc["methods"]["ours"]["auroc"]) == {"noise:1", "noise:3",
                                                    "fog:1", "fog:3"}
    assert (out / "histograms.csv").exists()
    assert (out / "timing.json").exists()


def test_eval_ood_deterministic_metrics(workspace, runner):
    args = ["eval-ood", "--data", str(workspace["data"]),
            "--head", str(workspace["models"] / "head.ocuq"),
            "--gda", str(workspace["gda"]),
            "--methods", "ours", "--corruptions", "noise",
            "--severities", "1", "--seed", "7"]
    out_a = workspace["root"] / "det_a"
    out_b = workspace["root"] / "det_b"
    assert runner.invoke(main, args + ["--out", str(out_a)]).exit_code == 0
    assert runner.invoke(main, args + ["--out", str(out_b)]).exit_code == 0
    assert (out_a / "metrics.json").read_bytes() == (out_b / "metrics.json").read_bytes()
    assert (out_a / "histograms.csv").read_bytes() == (out_b / "histograms.csv").read_bytes()


def test_eval_ood_rejects_unknown_method(workspace, runner):
    r = runner.invoke(main, ["eval-ood", "--data", str(workspace["data"]),
                             "--head", str(workspace["models"] / "head.ocuq"),
                             "--methods", "telepathy",
                             "--out", str(workspace["root"] / "x")])
    assert r.exit_code == 2


def test_eval_ood_ours_without_gda_exit_2(workspace, runner):
    r = runner.invoke(main, ["eval-ood", "--data", str(workspace["data"]),
                             "--head", str(workspace["models"] / "head.ocuq"),
                             "--methods", "ours",
                             "--out", str(workspace["root"] / "x")])
    assert r.exit_code == 2


def test_eval_ood_rejects_unknown_corruption(workspace, runner):
    r = runner.invoke(main, ["eval-ood", "--data", str(workspace["data"]),
                             "--head", str(workspace["models"] / "head.ocuq"),
                             "--gda", str(workspace["gda"]),
                             "--methods", "ours", "--corruptions", "hail",
                             "--out", str(workspace["root"] / "x")])
    assert r.exit_code == 2


def test_calibrate_writes_params_and_report(workspace, runner):
    out = workspace["root"] / "calib"
    r = runner.invoke(main, ["calibrate", "--data", str(workspace["data"]),
                             "--head", str(workspace["models"] / "head.ocuq"),
                             "--gda", str(workspace["gda"]),
                             "--method", "ours", "--mode", "ugts",
                             "--out", str(out), "--seed", "7"])
    assert r.exit_code == 0, r.output
    assert (out / "calib.ocuq").exists()
    doc = json.loads((out / "calibration.json").read_text())
    assert doc["method"] == "ours"
    assert "clean" in doc["results"] and "corrupted" in doc["results"]
    assert doc["t_train"] > 0


def test_report_renders_from_metrics(workspace, runner):
    bench = workspace["root"] / "bench"
    out = workspace["root"] / "rendered"
    r = runner.invoke(main, ["report", "--metrics", str(bench / "metrics.json"),
                             "--out-dir", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "tables.md").exists()
    assert list(out.glob("hist_*.svg"))


def test_report_missing_metrics_exit_2(workspace, runner):
    r = runner.invoke(main, ["report", "--metrics",
                             str(workspace["root"] / "absent.json"),
                             "--out-dir", str(workspace["root"] / "x")])
    assert r.exit_code == 2


def test_report_schema_mismatch_exit_2(workspace, runner, tmp_path):
    bad = tmp_path / "metrics.json"
    bad.write_text('{"schema_version": 999, "methods": {}}')
    r = runner.invoke(main, ["report", "--metrics", str(bad),
                             "--out-dir", str(tmp_path / "out")])
    assert r.exit_code == 2


def test_dim_sweep_tabulates_param_counts(workspace, runner):
    out = workspace["root"] / "dims"
    r = runner.invoke(main, ["dim-sweep", "--dims", "4,8",
                             "--config", str(workspace["config"]),
                             "--out", str(out), "--seed", "7"])
    assert r.exit_code == 0, r.output
    rows = json.loads((out / "dim_sweep.json").read_text())["rows"]
    assert [row["dim"] for row in rows] == [4, 8]
    assert rows[0]["gmm_params"] == 5 * (4 + 16)
    assert rows[1]["gmm_params"] == 5 * (8 + 64)
    assert (out / "dim_sweep.md").exists()
