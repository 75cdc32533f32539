import numpy as np
import pytest

from forecasting.lof_labels import keyframe_steps, scene_lof_labels
from forecasting.scene_model import load_scene, scene_arrays, validate_scene
from forecasting.synth_scenarios import (
    LAYOUTS,
    MAX_SPEED,
    GenConfig,
    build_lane_graph,
    generate_dataset,
    generate_scene,
    manifest_digest,
    resolve_layout,
    speed_profile,
)


@pytest.mark.parametrize("layout", LAYOUTS)
def test_every_layout_yields_valid_scene(layout):
    scene = generate_scene(GenConfig(seed=3, layout=layout))
    assert validate_scene(scene) == []
    assert scene.meta["layout"] == layout
    assert len(scene.polygons) <= GenConfig().max_polygons


@pytest.mark.slow
def test_thousand_seeds_all_valid():
    for seed in range(1000):
        scene = generate_scene(GenConfig(seed=seed, layout="mixed"))
        assert validate_scene(scene) == [], seed


def test_straight_lanes_sample_every_two_meters():
    graph = build_lane_graph(GenConfig(layout="straight", road_length=100.0, point_spacing=2.0))
    by_id = {pt.point_id: pt for pt in graph.points}
    for poly in graph.polygons:
        center = [by_id[pid] for pid in poly.point_ids if by_id[pid].kind == "centerline"]
        assert len(center) == 51
        xy = np.array([[pt.pose.x, pt.pose.y] for pt in center])
        np.testing.assert_allclose(np.linalg.norm(np.diff(xy, axis=0), axis=1), 2.0)


def test_same_seed_same_scene():
    config = GenConfig(seed=11, layout="crossroad")
    assert generate_scene(config) == generate_scene(config)


def test_different_seeds_differ():
    a = generate_scene(GenConfig(seed=1, layout="straight"))
    b = generate_scene(GenConfig(seed=2, layout="straight"))
    assert a != b


def test_speeds_within_bounds():
    for seed in range(10):
        arr = scene_arrays(generate_scene(GenConfig(seed=seed, layout="mixed")))
        speeds = np.linalg.norm(np.diff(arr.future_pos, axis=1), axis=-1) / 0.1
        assert speeds.max() <= MAX_SPEED + 1e-6


def test_mixed_layout_cycles_by_seed():
    assert [resolve_layout(GenConfig(seed=s, layout="mixed")) for s in range(4)] == list(LAYOUTS)


def test_crossroad_graph_counts():
    graph = build_lane_graph(GenConfig(layout="crossroad"))
    kinds = [poly.kind for poly in graph.polygons]
    assert kinds.count("lane") == 20
    assert kinds.count("crosswalk") == 4


def test_stop_and_go_reaches_standstill():
    profile = speed_profile("stop_and_go", 10.0, 40, np.random.default_rng(0))
    assert profile.min() == 0.0
    assert profile.max() <= MAX_SPEED


def test_embedded_labels_match_recomputed(synth_scene):
    recomputed = scene_lof_labels(synth_scene, 2.0, keyframe_steps(6, 3))
    np.testing.assert_array_equal(np.array(synth_scene.lof_labels), recomputed)


def test_dataset_files_and_determinism(tmp_path):
    config = GenConfig(seed=5, layout="T_intersection")
    first = generate_dataset(3, config, tmp_path / "a")
    second = generate_dataset(3, config, tmp_path / "b")
    assert manifest_digest(first) == manifest_digest(second)
    assert first["n_scenes"] == 3
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["manifest.json", "scene_00000.json", "scene_00001.json", "scene_00002.json"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_scene(tmp_path / "a" / "scene_00001.json").meta["seed"] == 6


class TestGenConfig:
    def test_rejects_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            GenConfig.from_dict({"bogus": 1})

    def test_rejects_indivisible_horizon(self):
        with pytest.raises(ValueError, match="divisible"):
            GenConfig(T=31, n_kf=3)

    def test_rejects_unknown_layout(self):
        with pytest.raises(ValueError, match="layout"):
            GenConfig(layout="roundabout")

    def test_round_trip(self):
        config = GenConfig(seed=9, speed_range=(1.0, 8.0))
        assert GenConfig.from_dict(config.to_dict()) == config
