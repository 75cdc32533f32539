import json

import pytest

import futurenet

TINY = {
    "model": {"D": 16, "heads": 2, "K": 2, "n_kf": 3, "layers_map": 1, "layers_main": 1, "layers_mode": 1, "T_h": 4, "T": 6},
    "train": {"batch_size": 2, "total_steps": 2, "checkpoint_every": 1, "log_every": 1},
    "gen": {"layout": "straight", "T_h": 4, "T": 6, "n_kf": 3, "n_agents_range": [2, 3]},
}


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("FUTURENET_RUNS_DB", str(tmp_path / "runs.db"))
    monkeypatch.delenv("FUTURENET_SEED", raising=False)


def _write_config(path, data=TINY):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


@pytest.fixture
def tiny_run(tmp_path):
    config = _write_config(tmp_path / "tiny.json")
    data = tmp_path / "scenes"
    assert futurenet.main(["gen", "--n", "3", "--seed", "1", "--out", str(data), "--config", config]) == 0
    out = tmp_path / "run"
    assert futurenet.main(["train", "--data", str(data), "--out", str(out), "--config", config]) == 0
    return config, data, out / "checkpoint.pt"


def test_gen_writes_scenes_and_manifest(tmp_path):
    out = tmp_path / "d"
    assert futurenet.main(["gen", "--n", "5", "--seed", "1", "--layout", "crossroad", "--out", str(out)]) == 0
    assert len(list(out.glob("scene_*.json"))) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert {entry["layout"] for entry in manifest["scenes"]} == {"crossroad"}


def test_seed_env_is_overridden_by_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("FUTURENET_SEED", "9")
    assert futurenet.main(["gen", "--n", "1", "--out", str(tmp_path / "env")]) == 0
    assert futurenet.main(["gen", "--n", "1", "--seed", "4", "--out", str(tmp_path / "flag")]) == 0
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 9
    assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["seed"] == 4


def test_missing_out_is_usage_error(capsys):
    assert futurenet.main(["gen", "--n", "2"]) == 2
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero():
    assert futurenet.main(["train", "--help"]) == 0


def test_empty_data_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert futurenet.main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert "no scenes" in capsys.readouterr().err


def test_missing_data_dir_is_io_error(tmp_path):
    assert futurenet.main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 3


def test_unknown_config_key(tmp_path):
    config = _write_config(tmp_path / "bad.json", {"model": {"width": 3}})
    assert futurenet.main(["gen", "--n", "1", "--out", str(tmp_path / "x"), "--config", config]) == 2


def test_train_eval_predict_plot(tmp_path, tiny_run):
    config, data, ckpt = tiny_run
    assert ckpt.exists()
    lines = (ckpt.parent / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2

    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "table.csv"
    assert futurenet.main(
        ["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report_path), "--csv", str(csv_path)]
    ) == 0
    report = json.loads(report_path.read_text())
    assert report["n_scenes"] == 3
    assert "minFDE_2" in report["trajectory"]
    assert len(report["lof"]["per_keyframe"]) == 3
    assert csv_path.read_text().startswith("source,step")

    scene = sorted(data.glob("scene_*.json"))[0]
    forecast_path = tmp_path / "forecast.json"
    assert futurenet.main(["predict", "--ckpt", str(ckpt), "--scene", str(scene), "--out", str(forecast_path)]) == 0
    forecast = json.loads(forecast_path.read_text())
    assert len(forecast["loc"][0][0]) == 6

    figure = tmp_path / "fig.png"
    assert futurenet.main(["plot", "--scene", str(scene), "--forecast", str(forecast_path), "--out", str(figure)]) == 0
    assert figure.stat().st_size > 0
    assert futurenet.main(
        ["plot", "--scene", str(scene), "--forecast", str(forecast_path), "--out", str(figure), "--keyframe", "7"]
    ) == 2


def test_eval_with_other_model_config(tmp_path, tiny_run):
    _, data, ckpt = tiny_run
    other = dict(TINY, model=dict(TINY["model"], K=3))
    config = _write_config(tmp_path / "other.json", other)
    code = futurenet.main(
        ["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(tmp_path / "r.json"), "--config", config]
    )
    assert code == 4


def test_corrupt_checkpoint(tmp_path, tiny_run):
    _, data, ckpt = tiny_run
    ckpt.write_bytes(ckpt.read_bytes()[:-10])
    assert futurenet.main(["predict", "--ckpt", str(ckpt), "--scene", str(next(data.glob("scene_*.json"))), "--out", str(tmp_path / "f.json")]) == 4
