import hashlib
import json

import pytest

from glaciermap.cli import main
from glaciermap.config import load_toml


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def events(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset and a briefly trained model, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--tiles", "6", "--size", "32", "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data/manifest.json"), "--cycles", "1", "--steps-per-epoch", "2",
                 "--batch-size", "2", "--out", str(root / "model")]) == 0
    return root


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--tiles", "4", "--size", "24", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["divides", "--help"])
    assert exc.value.code == 0
    assert "--two-cone" in capsys.readouterr().out


def test_estimate_iou_requires_calibrator(workspace, tmp_path, capsys):
    code = main(["estimate-iou", "--model", str(workspace / "model/model.ckpt"),
                 "--data", str(workspace / "data/manifest.json"), "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "calibrate first" in err[0]


def test_train_outputs_and_precedence(workspace, tmp_path):
    (tmp_path / "run.toml").write_text("seed = 3\n[train]\nbatch_size = 5\nsteps_per_epoch = 1\ncycles = [1]\n")
    assert main(["train", "--config", str(tmp_path / "run.toml"), "--batch-size", "2",
                 "--data", str(workspace / "data/manifest.json"), "--out", str(tmp_path / "m")]) == 0
    snap = load_toml(tmp_path / "m/config.toml")
    assert snap["train"]["batch_size"] == 2 and snap["train"]["steps_per_epoch"] == 1 and snap["seed"] == 3
    assert (tmp_path / "m/history.csv").read_text().startswith("epoch,lr,train_loss,val_iou")


def test_bad_config_exits_1(workspace, tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("[train]\nwarp = 9\n")
    code = main(["train", "--config", str(tmp_path / "bad.toml"), "--data", str(workspace / "data/manifest.json"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "unknown keys" in capsys.readouterr().err


def test_missing_model_exits_1(workspace, tmp_path):
    assert main(["predict", "--model", str(tmp_path / "none.ckpt"), "--scene",
                 str(workspace / "data/manifest.json"), "--out", str(tmp_path)]) == 1


def test_predict_evaluate_chain(workspace, tmp_path, capsys):
    data = workspace / "data"
    before = tree_digest(data)
    assert main(["predict", "--model", str(workspace / "model/model.ckpt"), "--scene", str(data / "manifest.json"),
                 "--split", "all", "--overlap", "8", "--out", str(tmp_path / "pred")]) == 0
    assert tree_digest(data) == before
    summary = json.loads((tmp_path / "pred/summary.json").read_text())
    tid = summary["tiles"][0]["tile_id"]
    for suffix in ("_mask.tif", "_confidence.tif", "_outlines.geojson"):
        assert (tmp_path / "pred" / f"{tid}{suffix}").exists()
    capsys.readouterr()
    assert main(["evaluate", "--pred", str(tmp_path / "pred"), "--data", str(data / "manifest.json"),
                 "--out", str(tmp_path / "eval")]) == 0
    ev = events(capsys)[-1]
    assert ev["event"] == "evaluate" and 0 <= ev["glacier_iou"] <= 1


def test_calibrate_then_estimate(workspace, tmp_path, capsys):
    model, data = str(workspace / "model/model.ckpt"), str(workspace / "data/manifest.json")
    assert main(["calibrate", "--model", model, "--data", data, "--split", "all", "--bins", "20",
                 "--out", str(tmp_path / "cal")]) == 0
    for name in ("calibrator.json", "reliability_raw.csv", "reliability_calibrated.png", "calibration.json"):
        assert (tmp_path / "cal" / name).exists()
    assert main(["estimate-iou", "--model", model, "--data", data, "--split", "all",
                 "--calibrator", str(tmp_path / "cal/calibrator.json"), "--out", str(tmp_path / "est")]) == 0
    header = (tmp_path / "est/iou_estimates.csv").read_text().splitlines()[0]
    assert header == "tile_id,mean_conf,n_p,n_n,est_iou,actual_iou"
    assert (tmp_path / "est/iou_estimates.png").exists()
    assert main(["plot-reliability", "--csv", str(tmp_path / "cal/reliability_raw.csv"),
                 "--out", str(tmp_path / "r.png")]) == 0
    assert (tmp_path / "r.png").exists()


def test_divides_two_cone(tmp_path, capsys):
    assert main(["divides", "--two-cone", "--out", str(tmp_path)]) == 0
    ev = events(capsys)[-1]
    assert ev["divides"] == 1 and ev["average_m"] <= 20
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert set(metrics) == {"rc_to_rf_m", "rf_to_rc_m", "average_m"}
    # the same scene read back from GeoTIFF and GeoJSON
    assert main(["divides", "--dem", str(tmp_path / "dem.tif"), "--mask", str(tmp_path / "mask.tif"),
                 "--reference", str(tmp_path / "reference.geojson"), "--out", str(tmp_path / "again")]) == 0
    assert events(capsys)[-1]["average_m"] == pytest.approx(ev["average_m"])


def test_divides_calibrate_needs_reference(tmp_path):
    assert main(["divides", "--calibrate", "--out", str(tmp_path)]) == 1


def test_compare(workspace, tmp_path):
    assert main(["compare", "--data", str(workspace / "data/manifest.json"), "--configs",
                 "global:OPT_DEM,global:OPT_DEM_THERMAL", "--cycles", "1", "--steps-per-epoch", "1",
                 "--batch-size", "2", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "comparison.csv").read_text().splitlines()
    assert rows[0] == "region,global/OPT_DEM,global/OPT_DEM_THERMAL"
    assert rows[-1].startswith("Average")
