"""Collation of scenes into flat tensors, plus neighborhood (edge) construction.

Every element class is flattened across the batch with a `*_batch` vector naming its
scene. Edges are `[2, E]` long tensors: row 0 is the key/source j, row 1 the query i.
Geometry (positions, headings) is kept in float64; learned features use the model dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .geometry import featurize_invariant
from .lof_labels import generate_lof_labels, keyframe_steps
from .scene_model import Scene, scene_arrays

GEOMETRY_DTYPE = torch.float64


@dataclass
class SceneBatch:
    scene_ids: list[str]
    dt: float
    agent_pos: torch.Tensor
    agent_heading: torch.Tensor
    agent_valid: torch.Tensor
    agent_step: torch.Tensor
    agent_attr: torch.Tensor
    agent_batch: torch.Tensor
    future_pos: torch.Tensor
    future_valid: torch.Tensor
    polygon_pos: torch.Tensor
    polygon_heading: torch.Tensor
    polygon_attr: torch.Tensor
    polygon_batch: torch.Tensor
    point_pos: torch.Tensor
    point_heading: torch.Tensor
    point_attr: torch.Tensor
    point_polygon: torch.Tensor
    point_batch: torch.Tensor
    lof_labels: torch.Tensor | None
    agents_per_scene: list[int]
    points_per_scene: list[int]

    @property
    def n_scenes(self) -> int:
        return len(self.scene_ids)

    @property
    def n_agents(self) -> int:
        return int(self.agent_pos.shape[0])

    @property
    def history_steps(self) -> int:
        return int(self.agent_pos.shape[1])

    @property
    def current_step(self) -> torch.Tensor:
        return self.agent_step[:, -1]

    def to(self, device: torch.device | str) -> SceneBatch:
        moved = {}
        for f in fields(self):
            value = getattr(self, f.name)
            moved[f.name] = value.to(device) if isinstance(value, torch.Tensor) else value
        return SceneBatch(**moved)


def collate_scenes(
    scenes: Sequence[Scene],
    *,
    n_keyframes: int | None = None,
    lof_threshold: float = 2.0,
    dtype: torch.dtype = torch.float32,
) -> SceneBatch:
    if not scenes:
        raise ValueError("cannot collate an empty scene list")
    dts = {scene.dt for scene in scenes}
    if len(dts) != 1:
        raise ValueError(f"scenes in one batch must share dt, got {sorted(dts)}")
    t_h = {scene.history_steps for scene in scenes}
    if len(t_h) != 1:
        raise ValueError(f"scenes in one batch must share the history length, got {sorted(t_h)}")
    horizons = {scene.future_steps for scene in scenes}
    if len(horizons) != 1:
        raise ValueError("scenes in one batch must all carry futures of equal length, or none")

    parts: dict[str, list[np.ndarray]] = {}
    labels: list[np.ndarray] = []
    polygon_offset = 0

    def add(name: str, value: np.ndarray) -> None:
        parts.setdefault(name, []).append(value)

    for index, scene in enumerate(scenes):
        arr = scene_arrays(scene)
        attrs = featurize_invariant(scene)
        n_agents, n_polygons, n_points = len(scene.agents), len(scene.polygons), len(scene.points)
        add("agent_pos", arr.agent_pos)
        add("agent_heading", arr.agent_heading)
        add("agent_valid", arr.agent_valid)
        add("agent_step", arr.agent_step)
        add("agent_attr", attrs.agent)
        add("agent_batch", np.full(n_agents, index, dtype=np.int64))
        add("future_pos", arr.future_pos)
        add("future_valid", arr.future_valid)
        add("polygon_pos", arr.polygon_pos)
        add("polygon_heading", arr.polygon_heading)
        add("polygon_attr", attrs.polygon)
        add("polygon_batch", np.full(n_polygons, index, dtype=np.int64))
        add("point_pos", arr.point_pos)
        add("point_heading", arr.point_heading)
        add("point_attr", attrs.point)
        add("point_polygon", arr.point_polygon + polygon_offset)
        add("point_batch", np.full(n_points, index, dtype=np.int64))
        polygon_offset += n_polygons
        if n_keyframes and scene.futures:
            labels.append(
                generate_lof_labels(
                    arr.future_pos,
                    arr.future_valid,
                    arr.point_pos,
                    lof_threshold,
                    keyframe_steps(scene.future_steps, n_keyframes),
                )
            )

    def cat(name: str, dtype_: torch.dtype) -> torch.Tensor:
        return torch.as_tensor(np.concatenate(parts[name], axis=0)).to(dtype_)

    return SceneBatch(
        scene_ids=[scene.scene_id for scene in scenes],
        dt=float(scenes[0].dt),
        agent_pos=cat("agent_pos", GEOMETRY_DTYPE),
        agent_heading=cat("agent_heading", GEOMETRY_DTYPE),
        agent_valid=cat("agent_valid", torch.bool),
        agent_step=cat("agent_step", torch.long),
        agent_attr=cat("agent_attr", dtype),
        agent_batch=cat("agent_batch", torch.long),
        future_pos=cat("future_pos", GEOMETRY_DTYPE),
        future_valid=cat("future_valid", torch.bool),
        polygon_pos=cat("polygon_pos", GEOMETRY_DTYPE),
        polygon_heading=cat("polygon_heading", GEOMETRY_DTYPE),
        polygon_attr=cat("polygon_attr", dtype),
        polygon_batch=cat("polygon_batch", torch.long),
        point_pos=cat("point_pos", GEOMETRY_DTYPE),
        point_heading=cat("point_heading", GEOMETRY_DTYPE),
        point_attr=cat("point_attr", dtype),
        point_polygon=cat("point_polygon", torch.long),
        point_batch=cat("point_batch", torch.long),
        lof_labels=torch.as_tensor(np.concatenate(labels, axis=1)).to(dtype) if labels else None,
        agents_per_scene=[len(scene.agents) for scene in scenes],
        points_per_scene=[len(scene.points) for scene in scenes],
    )


# --- neighborhoods --------------------------------------------------------


def _empty_edges(device: torch.device) -> torch.Tensor:
    return torch.zeros((2, 0), dtype=torch.long, device=device)


@torch.no_grad()
def radius_edges(
    q_pos: torch.Tensor,
    q_group: torch.Tensor,
    k_pos: torch.Tensor,
    k_group: torch.Tensor,
    radius: float,
    *,
    q_valid: torch.Tensor | None = None,
    k_valid: torch.Tensor | None = None,
    exclude_self: bool = False,
) -> torch.Tensor:
    """Keys j within `radius` (inclusive) of query i and in the same group."""
    device = q_pos.device
    q_ok = torch.ones(len(q_pos), dtype=torch.bool, device=device) if q_valid is None else q_valid
    k_ok = torch.ones(len(k_pos), dtype=torch.bool, device=device) if k_valid is None else k_valid
    chunks: list[torch.Tensor] = []
    shared = torch.unique(q_group[q_ok]).tolist()
    for group in shared:
        qi = torch.nonzero((q_group == group) & q_ok).squeeze(1)
        ki = torch.nonzero((k_group == group) & k_ok).squeeze(1)
        if len(qi) == 0 or len(ki) == 0:
            continue
        diff = q_pos[qi].to(GEOMETRY_DTYPE)[:, None, :] - k_pos[ki].to(GEOMETRY_DTYPE)[None, :, :]
        mask = (diff * diff).sum(-1) <= radius * radius
        if exclude_self:
            mask &= qi[:, None] != ki[None, :]
        rows, cols = torch.nonzero(mask, as_tuple=True)
        chunks.append(torch.stack([ki[cols], qi[rows]]))
    if not chunks:
        return _empty_edges(device)
    return torch.cat(chunks, dim=1)


@torch.no_grad()
def membership_edges(parent: torch.Tensor, *, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Each element j attends into its parent i (e.g. map point -> owning polygon)."""
    src = torch.arange(len(parent), device=parent.device)
    if valid is not None:
        src = src[valid]
    return torch.stack([src, parent[src]])


@torch.no_grad()
def causal_temporal_edges(valid: torch.Tensor, span: int) -> torch.Tensor:
    """Within each trajectory [N, T]: state j precedes state i by 1..span steps."""
    n, steps = valid.shape
    index = torch.arange(n * steps, device=valid.device).view(n, steps)
    chunks: list[torch.Tensor] = []
    for gap in range(1, min(span, steps - 1) + 1):
        src = index[:, :-gap]
        dst = index[:, gap:]
        ok = valid[:, :-gap] & valid[:, gap:]
        chunks.append(torch.stack([src[ok], dst[ok]]))
    if not chunks:
        return _empty_edges(valid.device)
    edges = torch.cat(chunks, dim=1)
    order = torch.argsort(edges[1] * (n * steps) + edges[0])
    return edges[:, order]


@torch.no_grad()
def history_to_query_edges(
    valid: torch.Tensor,
    step: torch.Tensor,
    query_agent: torch.Tensor,
    query_step: torch.Tensor,
    span: int,
) -> torch.Tensor:
    """Query q of agent a attends a's history states no later than, and within `span` of, its step."""
    n, steps = valid.shape
    gap = query_step[:, None] - step[query_agent]
    ok = valid[query_agent] & (gap >= 0) & (gap <= span)
    rows, cols = torch.nonzero(ok, as_tuple=True)
    return torch.stack([query_agent[rows] * steps + cols, rows])


@torch.no_grad()
def mode_edges(n_agents: int, n_modes: int, device: torch.device | str = "cpu") -> torch.Tensor:
    """All ordered pairs (including self) among the K queries of each agent; query index = a*K + k."""
    a = torch.arange(n_agents, device=device)[:, None, None]
    k_src = torch.arange(n_modes, device=device)[None, :, None]
    k_dst = torch.arange(n_modes, device=device)[None, None, :]
    src = (a * n_modes + k_src).expand(n_agents, n_modes, n_modes)
    dst = (a * n_modes + k_dst).expand(n_agents, n_modes, n_modes)
    edges = torch.stack([src.transpose(1, 2).reshape(-1), dst.transpose(1, 2).reshape(-1)])
    return edges
