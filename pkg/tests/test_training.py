import json
import math

import pytest
import torch

from forecasting.training import (
    CheckpointVersionError,
    CorruptCheckpointError,
    ModelConfigMismatchError,
    TrainConfig,
    build_model,
    forecast_document,
    load_checkpoint,
    lr_schedule,
    read_checkpoint_header,
    save_checkpoint,
    seed_everything,
    train,
)
from forecasting.objectives import LossConfig
from conftest import make_scene, tiny_model_config


@pytest.fixture
def scenes(rng):
    return [make_scene(rng, scene_id=f"s{i}") for i in range(4)]


def _train_config(**overrides):
    values = dict(batch_size=2, total_steps=6, checkpoint_every=3, log_every=1, seed=3)
    values.update(overrides)
    return TrainConfig(**values)


def _assert_same_params(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for key in sa:
        assert torch.equal(sa[key], sb[key]), key


class TestSchedule:
    def test_endpoints(self):
        config = TrainConfig(total_steps=100, lr_min=1e-5)
        assert lr_schedule(0, config) == pytest.approx(5e-4)
        assert lr_schedule(100, config) == pytest.approx(1e-5)
        assert lr_schedule(50, config) == pytest.approx((5e-4 + 1e-5) / 2)

    def test_outside_range(self):
        with pytest.raises(ValueError):
            lr_schedule(101, TrainConfig(total_steps=100))

    @pytest.mark.parametrize("overrides", [{"lr0": 0.0}, {"total_steps": 0}, {"precision": "half"}])
    def test_rejects_invalid(self, overrides):
        with pytest.raises(ValueError):
            TrainConfig(**overrides)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path, tiny_config):
        model = build_model(tiny_config)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, model, None, 7, meta={"note": "x"})
        loaded = load_checkpoint(path)
        assert loaded.step == 7
        assert loaded.model_config == tiny_config
        assert loaded.optimizer_state is None
        _assert_same_params(model, loaded.model)

    def test_double_precision_survives(self, tmp_path, tiny_config):
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, build_model(tiny_config, torch.float64), None, 0)
        assert next(load_checkpoint(path).model.parameters()).dtype == torch.float64

    def test_header_readable_alone(self, tmp_path, tiny_config):
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, build_model(tiny_config), None, 2)
        header = read_checkpoint_header(path)
        assert header["version"] == 1
        assert header["step"] == 2
        assert header["model_config"]["D"] == 16

    def test_truncated_file(self, tmp_path, tiny_config):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(str(path), build_model(tiny_config), None, 0)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(CorruptCheckpointError, match="truncated"):
            load_checkpoint(str(path))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_bytes(b"hello")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(str(path))

    def test_version_mismatch(self, tmp_path, tiny_config):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(str(path), build_model(tiny_config), None, 0)
        header_line, payload = path.read_bytes().split(b"\n", 1)
        header = json.loads(header_line)
        header["version"] = 99
        path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(str(path))

    def test_config_mismatch(self, tmp_path, tiny_config):
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, build_model(tiny_config), None, 0)
        with pytest.raises(ModelConfigMismatchError):
            load_checkpoint(path, expected_config=tiny_model_config(K=3))


class TestTrain:
    def test_zero_steps_saves_initialization(self, tmp_path, scenes, tiny_config):
        result = train(scenes, tiny_config, LossConfig(), _train_config(), out_dir=str(tmp_path), max_steps=0)
        assert result.step == 0
        assert result.history == []
        seed_everything(3)
        _assert_same_params(build_model(tiny_config), load_checkpoint(result.checkpoint_path).model)

    def test_log_records(self, tmp_path, scenes, tiny_config):
        result = train(scenes, tiny_config, LossConfig(), _train_config(total_steps=3), out_dir=str(tmp_path))
        lines = [json.loads(line) for line in open(result.log_path, encoding="utf-8")]
        assert [r["step"] for r in lines] == [1, 2, 3]
        assert set(lines[0]) == {"step", "lr", "L_propose", "L_refine", "L_cls", "L_lof", "total"}
        assert lines[0]["lr"] == pytest.approx(5e-4)
        assert all(math.isfinite(r["total"]) for r in lines)

    def test_rerun_rewrites_the_log(self, tmp_path, scenes, tiny_config):
        first = train(scenes, tiny_config, LossConfig(), _train_config(total_steps=3), out_dir=str(tmp_path))
        before = open(first.log_path, "rb").read()
        second = train(scenes, tiny_config, LossConfig(), _train_config(total_steps=3), out_dir=str(tmp_path))
        assert open(second.log_path, "rb").read() == before

    def test_same_seed_same_curve(self, tmp_path, scenes, tiny_config):
        a = train(scenes, tiny_config, LossConfig(), _train_config(), out_dir=str(tmp_path / "a"), max_steps=3)
        b = train(scenes, tiny_config, LossConfig(), _train_config(), out_dir=str(tmp_path / "b"), max_steps=3)
        assert a.history == b.history

    def test_resume_continues_the_same_run(self, tmp_path, scenes, tiny_config):
        config = _train_config(total_steps=4)
        straight = train(scenes, tiny_config, LossConfig(), config, out_dir=str(tmp_path / "full"))
        first = train(scenes, tiny_config, LossConfig(), config, out_dir=str(tmp_path / "split"), max_steps=2)
        second = train(
            scenes, tiny_config, LossConfig(), config, out_dir=str(tmp_path / "split"), resume=first.checkpoint_path,
        )
        assert second.step == 4
        assert [r["step"] for r in second.history] == [3, 4]
        logged = [json.loads(line)["step"] for line in open(second.log_path, encoding="utf-8")]
        assert logged == [1, 2, 3, 4]
        for x, y in zip(straight.history[2:], second.history):
            assert y["total"] == pytest.approx(x["total"], rel=1e-5)
        full = load_checkpoint(straight.checkpoint_path).model
        resumed = load_checkpoint(second.checkpoint_path).model
        for p, q in zip(full.parameters(), resumed.parameters()):
            torch.testing.assert_close(p, q)

    def test_resume_with_other_config_fails(self, tmp_path, scenes, tiny_config):
        first = train(scenes, tiny_config, LossConfig(), _train_config(), out_dir=str(tmp_path), max_steps=1)
        with pytest.raises(ModelConfigMismatchError):
            train(
                scenes, tiny_model_config(D=8), LossConfig(), _train_config(),
                out_dir=str(tmp_path), resume=first.checkpoint_path,
            )

    def test_rejects_empty_dataset(self, tmp_path, tiny_config):
        with pytest.raises(ValueError):
            train([], tiny_config, LossConfig(), _train_config(), out_dir=str(tmp_path))

    @pytest.mark.parametrize("shape, message", [({"horizon": 8}, "T=6"), ({"history": 5}, "T_h=4")])
    def test_rejects_scenes_of_another_horizon(self, tmp_path, rng, tiny_config, shape, message):
        odd = [make_scene(rng, scene_id="odd", **shape)]
        with pytest.raises(ValueError, match=message):
            train(odd, tiny_config, LossConfig(), _train_config(), out_dir=str(tmp_path))

    def test_gradients_are_clipped(self, tmp_path, scenes, tiny_config, monkeypatch):
        norms = []
        original = torch.nn.utils.clip_grad_norm_

        def spy(params, max_norm, *args, **kwargs):
            params = list(params)
            original(params, max_norm, *args, **kwargs)
            total = torch.norm(torch.stack([p.grad.norm() for p in params if p.grad is not None]))
            norms.append(float(total))

        monkeypatch.setattr(torch.nn.utils, "clip_grad_norm_", spy)
        train(scenes, tiny_config, LossConfig(), _train_config(grad_clip_norm=1e-3), out_dir=str(tmp_path), max_steps=2)
        assert len(norms) == 2
        assert all(n <= 1e-3 * (1.0 + 1e-4) for n in norms)

    @pytest.mark.slow
    def test_overfits_a_small_set(self, tmp_path, rng):
        scenes = [make_scene(rng, scene_id=f"o{i}") for i in range(8)]
        config = tiny_model_config(D=32, heads=4)
        result = train(
            scenes, config, LossConfig(), _train_config(batch_size=8, total_steps=300, lr0=2e-3, checkpoint_every=300),
            out_dir=str(tmp_path),
        )
        assert result.history[-1]["total"] < 0.25 * result.history[0]["total"]


def test_forecast_document(tiny_scene, tiny_config):
    doc = forecast_document(build_model(tiny_config), tiny_scene)
    assert doc["scene_id"] == "tiny"
    assert doc["agent_ids"] == ["agent0", "agent1"]
    assert doc["keyframe_steps"] == [2, 4, 6]
    assert len(doc["loc"]) == 2 and len(doc["loc"][0]) == 2 and len(doc["loc"][0][0]) == 6
    assert len(doc["lof"]) == 3 and len(doc["lof"][0]) == 20
    json.dumps(doc)
