import math

import pytest
import torch
from torch import nn

from forecasting.batching import collate_scenes
from forecasting.decoder import (
    LOF_CLAMP,
    SCALE_FLOOR,
    FutureNet,
    TrajectoryQuerySet,
    _head,
    decode_waypoints,
    reanchor_from_endpoint,
    to_anchor_frame,
)
from forecasting.encoder import Anchors
from forecasting.scene_model import Pose2, apply_rigid_transform
from conftest import make_scene, tiny_model_config


def _forward(model, scenes, dtype=torch.float32):
    with torch.no_grad():
        return model(collate_scenes(scenes, dtype=dtype))


class TestForward:
    def test_shapes_and_ranges(self, tiny_scene, tiny_config):
        forecast, lof = _forward(FutureNet(tiny_config).eval(), [tiny_scene])
        assert forecast.loc.shape == (2, 2, 6, 2)
        assert forecast.scale.shape == (2, 2, 6, 2)
        assert forecast.proposal_loc.shape == (2, 2, 6, 2)
        assert forecast.logits.shape == (2, 2)
        torch.testing.assert_close(forecast.probs.sum(-1), torch.ones(2))
        assert torch.all(forecast.scale >= SCALE_FLOOR)
        assert torch.all(forecast.proposal_scale >= SCALE_FLOOR)
        assert lof.values.shape == (3, 20)
        assert torch.all(lof.values >= LOF_CLAMP)
        assert torch.all(lof.values <= 1.0 - LOF_CLAMP)

    def test_single_keyframe(self, tiny_scene):
        forecast, lof = _forward(FutureNet(tiny_model_config(n_kf=1)).eval(), [tiny_scene])
        assert forecast.loc.shape == (2, 2, 6, 2)
        assert lof.values.shape == (1, 20)

    def test_refine_off_keeps_proposal(self, tiny_scene):
        forecast, _ = _forward(FutureNet(tiny_model_config(refine=False)).eval(), [tiny_scene])
        assert forecast.logits is None
        torch.testing.assert_close(forecast.probs, torch.full((2, 2), 0.5))
        assert torch.equal(forecast.loc, forecast.proposal_loc)

    def test_lof_off(self, tiny_scene):
        _, lof = _forward(FutureNet(tiny_model_config(lof=False)).eval(), [tiny_scene])
        assert lof is None

    def test_recurrent_encoding_switches(self, tiny_scene):
        config = tiny_model_config(recurrent_map_encoding=False, recurrent_social_encoding=False)
        forecast, lof = _forward(FutureNet(config).eval(), [tiny_scene])
        assert torch.isfinite(forecast.loc).all()
        assert lof.values.shape == (3, 20)

    def test_history_length_must_match(self, rng, tiny_config):
        with pytest.raises(ValueError, match="T_h"):
            _forward(FutureNet(tiny_config), [make_scene(rng, history=5)])

    def test_equivariant_to_rigid_motion(self, tiny_scene, tiny_config):
        model = FutureNet(tiny_config).double().eval()
        g = Pose2(17.0, -42.0, 0.9)
        base, base_lof = _forward(model, [tiny_scene], torch.float64)
        moved, moved_lof = _forward(model, [apply_rigid_transform(tiny_scene, g)], torch.float64)
        c, s = math.cos(g.heading), math.sin(g.heading)
        rot = torch.tensor([[c, -s], [s, c]], dtype=torch.float64)
        expected = base.loc @ rot.T + torch.tensor([g.x, g.y], dtype=torch.float64)
        torch.testing.assert_close(moved.loc, expected, atol=1e-6, rtol=1e-6)
        torch.testing.assert_close(moved.probs, base.probs, atol=1e-8, rtol=1e-6)
        torch.testing.assert_close(moved.scale, base.scale, atol=1e-8, rtol=1e-6)
        torch.testing.assert_close(moved_lof.values, base_lof.values, atol=1e-8, rtol=1e-6)

    def test_batched_scenes_match_single(self, rng, tiny_config):
        a, b = make_scene(rng, scene_id="a"), make_scene(rng, n_agents=3, scene_id="b")
        model = FutureNet(tiny_config).double().eval()
        joint, joint_lof = _forward(model, [a, b], torch.float64)
        alone, alone_lof = _forward(model, [a], torch.float64)
        torch.testing.assert_close(joint.loc[:2], alone.loc)
        torch.testing.assert_close(joint.probs[:2], alone.probs)
        torch.testing.assert_close(joint_lof.values[:, :20], alone_lof.values)

    def test_gradients_flow_to_encoder(self, tiny_scene, tiny_config):
        model = FutureNet(tiny_config)
        forecast, lof = model(collate_scenes([tiny_scene]))
        (forecast.loc.sum() + forecast.probs[:, 0].sum() + lof.values.sum()).backward()
        grad = model.encoder.agent_embed.net[0].weight.grad
        assert grad is not None and grad.abs().sum() > 0


class TestReanchor:
    def test_heading_along_last_step(self):
        previous = Anchors(torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        waypoints = torch.tensor([[[0.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
        anchors = reanchor_from_endpoint(waypoints, previous)
        torch.testing.assert_close(anchors.pos, torch.tensor([[1.0, 1.0]], dtype=torch.float64))
        assert float(anchors.heading[0]) == pytest.approx(math.pi / 4)

    def test_stationary_keeps_previous_heading(self):
        previous = Anchors(torch.zeros(1, 2, dtype=torch.float64), torch.tensor([0.3], dtype=torch.float64))
        waypoints = torch.tensor([[[2.0, 2.0], [2.0, 2.0 + 1e-8]]], dtype=torch.float64)
        anchors = reanchor_from_endpoint(waypoints, previous)
        assert float(anchors.heading[0]) == pytest.approx(0.3)

    def test_needs_two_waypoints(self):
        previous = Anchors(torch.zeros(1, 2), torch.zeros(1))
        with pytest.raises(ValueError):
            reanchor_from_endpoint(torch.zeros(1, 1, 2), previous)


def test_zero_heads_put_waypoints_on_anchor():
    loc_head, scale_head = _head(4, 6), _head(4, 6)
    for p in loc_head.parameters():
        nn.init.zeros_(p)
    anchors = Anchors(
        torch.tensor([[1.0, 2.0], [-3.0, 4.0]], dtype=torch.float64), torch.tensor([0.5, -2.0], dtype=torch.float64)
    )
    tq = TrajectoryQuerySet(torch.randn(1, 2, 4), anchors, step=1)
    waypoints, scale = decode_waypoints(tq, loc_head, scale_head)
    assert waypoints.shape == (1, 2, 3, 2)
    torch.testing.assert_close(waypoints[0], anchors.pos[:, None, :].expand(2, 3, 2))
    assert torch.all(scale >= SCALE_FLOOR)


def test_anchor_frame_round_trip():
    anchors = Anchors(torch.tensor([[1.0, 1.0]], dtype=torch.float64), torch.tensor([math.pi / 2], dtype=torch.float64))
    local = to_anchor_frame(torch.tensor([[[1.0, 3.0]]], dtype=torch.float64), anchors)
    torch.testing.assert_close(local, torch.tensor([[[2.0, 0.0]]], dtype=torch.float64))
