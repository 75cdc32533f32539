"""Invariant featurization and relative descriptors between local-world anchors."""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
import torch

from .scene_model import AGENT_CATEGORIES, POINT_KINDS, POLYGON_KINDS, Pose2, Scene, scene_arrays, wrap_angle

AGENT_ATTR_DIM = 5 + len(AGENT_CATEGORIES)
POINT_ATTR_DIM = 2 + len(POINT_KINDS)
POLYGON_ATTR_DIM = 1 + len(POLYGON_KINDS)
DESCRIPTOR_DIM = 6
_EPS_SPEED = 1e-6
_EPS_DIST2 = 1e-12


@dataclass(frozen=True)
class RelativeDescriptor:
    distance: float
    direction: float
    rel_orientation: float
    time_gap: int


def relative_descriptor(
    anchor_i: Pose2,
    anchor_j: Pose2,
    step_i: int | None = None,
    step_j: int | None = None,
) -> RelativeDescriptor:
    dx, dy = anchor_j.x - anchor_i.x, anchor_j.y - anchor_i.y
    distance = math.hypot(dx, dy)
    if distance == 0.0:
        direction = 0.0
    else:
        c, s = math.cos(anchor_i.heading), math.sin(anchor_i.heading)
        direction = wrap_angle(math.atan2(-s * dx + c * dy, c * dx + s * dy))
    time_gap = 0 if step_i is None or step_j is None else step_j - step_i
    return RelativeDescriptor(
        distance=distance,
        direction=direction,
        rel_orientation=wrap_angle(anchor_j.heading - anchor_i.heading),
        time_gap=time_gap,
    )


def relative_descriptors(
    pos_i: torch.Tensor,
    heading_i: torch.Tensor,
    pos_j: torch.Tensor,
    heading_j: torch.Tensor,
    time_gap: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched descriptors over edges; gradients stay finite at zero distance."""
    delta = pos_j - pos_i
    c, s = torch.cos(heading_i), torch.sin(heading_i)
    local_x = c * delta[..., 0] + s * delta[..., 1]
    local_y = -s * delta[..., 0] + c * delta[..., 1]
    d2 = local_x * local_x + local_y * local_y
    coincident = d2 < _EPS_DIST2
    distance = torch.where(coincident, torch.zeros_like(d2), torch.sqrt(torch.where(coincident, torch.ones_like(d2), d2)))
    direction = torch.atan2(
        torch.where(coincident, torch.zeros_like(local_y), local_y),
        torch.where(coincident, torch.ones_like(local_x), local_x),
    )
    rel = heading_j - heading_i
    rel_orientation = torch.atan2(torch.sin(rel), torch.cos(rel))
    if time_gap is None:
        time_gap = torch.zeros_like(distance)
    return distance, direction, rel_orientation, time_gap.to(distance.dtype)


def descriptor_channels(
    distance: torch.Tensor,
    direction: torch.Tensor,
    rel_orientation: torch.Tensor,
    time_gap: torch.Tensor,
    dt: float,
) -> torch.Tensor:
    """[distance, cos/sin direction, cos/sin orientation, time gap in seconds]."""
    return torch.stack(
        [
            distance,
            torch.cos(direction),
            torch.sin(direction),
            torch.cos(rel_orientation),
            torch.sin(rel_orientation),
            time_gap * dt,
        ],
        dim=-1,
    )


@dataclass(frozen=True)
class InvariantAttributes:
    agent: np.ndarray
    point: np.ndarray
    polygon: np.ndarray


def _wrap_array(angles: np.ndarray) -> np.ndarray:
    wrapped = np.remainder(angles + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


def featurize_invariant(scene: Scene) -> InvariantAttributes:
    arr = scene_arrays(scene)
    n_agents, t_h = arr.agent_valid.shape

    # agent states: displacement, heading change, speed, velocity bearing, category one-hot, valid
    pair_valid = np.zeros_like(arr.agent_valid)
    pair_valid[:, 1:] = arr.agent_valid[:, 1:] & arr.agent_valid[:, :-1]
    displacement = np.zeros((n_agents, t_h))
    heading_change = np.zeros((n_agents, t_h))
    displacement[:, 1:] = np.linalg.norm(arr.agent_pos[:, 1:] - arr.agent_pos[:, :-1], axis=-1)
    heading_change[:, 1:] = _wrap_array(arr.agent_heading[:, 1:] - arr.agent_heading[:, :-1])
    displacement = np.where(pair_valid, displacement, 0.0)
    heading_change = np.where(pair_valid, heading_change, 0.0)

    speed = np.linalg.norm(arr.agent_vel, axis=-1)
    moving = arr.agent_valid & (speed > _EPS_SPEED)
    bearing = _wrap_array(np.arctan2(arr.agent_vel[..., 1], arr.agent_vel[..., 0]) - arr.agent_heading)
    bearing = np.where(moving, bearing, 0.0)
    speed = np.where(arr.agent_valid, speed, 0.0)

    category = np.zeros((n_agents, t_h, len(AGENT_CATEGORIES)))
    category[np.arange(n_agents), :, arr.agent_category] = 1.0
    agent = np.concatenate(
        [
            displacement[..., None],
            heading_change[..., None],
            speed[..., None],
            bearing[..., None],
            category,
            arr.agent_valid[..., None].astype(float),
        ],
        axis=-1,
    )

    # map points: offset and turn to the next point of the same kind in the polygon, kind one-hot
    n_points = len(arr.point_pos)
    has_next = arr.point_next >= 0
    nxt = np.where(has_next, arr.point_next, np.arange(n_points))
    offset = np.where(has_next, np.linalg.norm(arr.point_pos[nxt] - arr.point_pos, axis=-1), 0.0)
    turn = np.where(has_next, _wrap_array(arr.point_heading[nxt] - arr.point_heading), 0.0)
    point_kind = np.eye(len(POINT_KINDS))[arr.point_kind]
    point = np.concatenate([offset[:, None], turn[:, None], point_kind], axis=-1)

    polygon = np.concatenate(
        [np.eye(len(POLYGON_KINDS))[arr.polygon_kind], arr.polygon_length[:, None]], axis=-1
    )
    return InvariantAttributes(agent=agent, point=point, polygon=polygon)
