from __future__ import annotations

import math
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from forecasting.encoder import ModelConfig  # noqa: E402
from forecasting.scene_model import AgentHistory, AgentState, MapPoint, MapPolygon, Pose2, Scene  # noqa: E402
from forecasting.synth_scenarios import GenConfig, generate_scene  # noqa: E402

LANE_GAP = 3.5
POINT_SPACING = 2.0


def make_scene(
    rng: np.random.Generator,
    *,
    n_agents: int = 2,
    history: int = 4,
    horizon: int = 6,
    n_polygons: int = 2,
    points_per_polygon: int = 10,
    dt: float = 0.1,
    scene_id: str = "tiny",
) -> Scene:
    """Parallel straight lanes along +x with agents driving on them at constant speed."""
    polygons, points = [], []
    for m in range(n_polygons):
        pid = f"lane{m}"
        ids = []
        for i in range(points_per_polygon):
            point_id = f"{pid}:c{i}"
            points.append(MapPoint(point_id, Pose2(-10.0 + POINT_SPACING * i, LANE_GAP * m, 0.0), "centerline", pid))
            ids.append(point_id)
        polygons.append(MapPolygon(pid, "lane", points[-points_per_polygon].pose, tuple(ids)))

    agents, futures = [], []
    for a in range(n_agents):
        lane_y = LANE_GAP * (a % n_polygons)
        x0 = -8.0 + float(rng.uniform(0.0, 3.0)) + 1.5 * (a // n_polygons)
        speed = float(rng.uniform(3.0, 6.0))
        drift = float(rng.uniform(-0.3, 0.3))
        heading = math.atan2(drift, speed)
        states = []
        for t in range(history + horizon):
            pose = Pose2(x0 + speed * dt * t, lane_y + drift * dt * t, heading)
            states.append(AgentState(pose, speed, drift, True, t))
        agents.append(AgentHistory(f"agent{a}", "vehicle", tuple(states[:history])))
        futures.append(tuple(states[history:]))
    return Scene(
        scene_id=scene_id,
        dt=dt,
        agents=tuple(agents),
        polygons=tuple(polygons),
        points=tuple(points),
        futures=tuple(futures),
    )


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(D=16, heads=2, K=2, n_kf=3, layers_map=1, layers_main=1, layers_mode=1, T_h=4, T=6)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    torch.set_num_threads(1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_scene(rng) -> Scene:
    return make_scene(rng)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def synth_scene() -> Scene:
    return generate_scene(GenConfig(seed=7, layout="straight", T_h=4, T=6, n_kf=3, n_agents_range=(2, 3)), n_keyframes=3)
