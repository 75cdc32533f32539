from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import torch
from torch import nn

from .attention import LocalWorldAttention, MLPEmbedding
from .batching import SceneBatch, causal_temporal_edges, membership_edges, radius_edges
from .geometry import AGENT_ATTR_DIM, POINT_ATTR_DIM, POLYGON_ATTR_DIM, descriptor_channels, relative_descriptors


@dataclass(frozen=True)
class Radii:
    map_map: float = 150.0
    map_agent: float = 50.0
    agent_agent: float = 50.0
    map_tq: float = 150.0
    agent_tq: float = 150.0
    point_tq: float = 10.0
    tq_mq: float = 10.0
    mq_tq: float = 10.0


@dataclass(frozen=True)
class Spans:
    temporal: int = 10
    temporal_tq: int = 30


def _strict_kwargs(cls: type, data: dict[str, Any], label: str) -> dict[str, Any]:
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {label} keys: {sorted(unknown)}")
    return dict(data)


@dataclass(frozen=True)
class ModelConfig:
    D: int = 128
    heads: int = 8
    K: int = 6
    n_kf: int = 3
    layers_map: int = 1
    layers_main: int = 2
    layers_mode: int = 1
    radii: Radii = field(default_factory=Radii)
    spans: Spans = field(default_factory=Spans)
    T_h: int = 10
    T: int = 30
    dt: float = 0.1
    refine: bool = True
    lof: bool = True
    recurrent_map_encoding: bool = True
    recurrent_social_encoding: bool = True

    def __post_init__(self) -> None:
        if self.D < 1 or self.heads < 1 or self.D % self.heads != 0:
            raise ValueError(f"D ({self.D}) must be divisible by heads ({self.heads})")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_kf < 1:
            raise ValueError("n_kf must be >= 1")
        if self.T < 1 or self.T % self.n_kf != 0:
            raise ValueError(f"T ({self.T}) must be divisible by n_kf ({self.n_kf})")
        if self.T // self.n_kf < 2:
            raise ValueError("each recurrent segment needs at least two waypoints")
        if self.T_h < 2:
            raise ValueError("T_h must be >= 2")
        for name in ("layers_map", "layers_main", "layers_mode"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name, value in asdict(self.radii).items():
            if value <= 0:
                raise ValueError(f"radii.{name} must be positive")
        for name, value in asdict(self.spans).items():
            if value < 1:
                raise ValueError(f"spans.{name} must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def segment_length(self) -> int:
        return self.T // self.n_kf

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        values = _strict_kwargs(cls, data, "model config")
        if "radii" in values:
            values["radii"] = Radii(**_strict_kwargs(Radii, values["radii"], "model.radii"))
        if "spans" in values:
            values["spans"] = Spans(**_strict_kwargs(Spans, values["spans"], "model.spans"))
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Anchors:
    """Local-world origins: positions [N, 2] and headings [N] in float64; `step` None when atemporal."""

    pos: torch.Tensor
    heading: torch.Tensor
    step: torch.Tensor | None = None

    def __len__(self) -> int:
        return int(self.pos.shape[0])


@dataclass
class EncodedScene:
    F_A: torch.Tensor
    F_M: torch.Tensor
    F_m: torch.Tensor
    agent_anchors: Anchors
    polygon_anchors: Anchors
    point_anchors: Anchors
    batch: SceneBatch


def edge_channels(q: Anchors, kv: Anchors, edges: torch.Tensor, dt: float) -> torch.Tensor:
    """Descriptor channels of key j seen from query i for every edge, in float64."""
    src, dst = edges[0], edges[1]
    if q.step is None or kv.step is None:
        gap = None
    else:
        gap = kv.step[src] - q.step[dst]
    parts = relative_descriptors(q.pos[dst], q.heading[dst], kv.pos[src], kv.heading[src], gap)
    return descriptor_channels(*parts, dt=dt)


def local_world_attention(
    stage: LocalWorldAttention,
    q_feats: torch.Tensor,
    q_anchors: Anchors,
    kv_feats: torch.Tensor | None,
    kv_anchors: Anchors | None,
    edges: torch.Tensor,
    dt: float,
) -> torch.Tensor:
    """Run one stage. `kv_feats=None` attends among the queries themselves."""
    channels = None
    if stage.use_descriptor and edges.shape[1] > 0:
        channels = edge_channels(q_anchors, q_anchors if kv_anchors is None else kv_anchors, edges, dt)
    return stage(q_feats, kv_feats, edges, channels)


def embed_attributes(embedding: MLPEmbedding, attrs: torch.Tensor) -> torch.Tensor:
    return embedding(attrs)


class SceneEncoder(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        D, H = config.D, config.heads
        self.point_embed = MLPEmbedding(POINT_ATTR_DIM, D)
        self.polygon_embed = MLPEmbedding(POLYGON_ATTR_DIM, D)
        self.agent_embed = MLPEmbedding(AGENT_ATTR_DIM, D)
        self.point_to_polygon = LocalWorldAttention(D, H, config.layers_map)
        self.polygon_to_polygon = LocalWorldAttention(D, H, config.layers_map)
        self.temporal = LocalWorldAttention(D, H, config.layers_main)
        self.polygon_to_agent = LocalWorldAttention(D, H, config.layers_main)
        self.agent_to_agent = LocalWorldAttention(D, H, config.layers_main)

    def forward(self, batch: SceneBatch) -> EncodedScene:
        cfg = self.config
        dt = batch.dt
        n_agents, t_h = batch.agent_valid.shape

        point_anchors = Anchors(batch.point_pos, batch.point_heading)
        polygon_anchors = Anchors(batch.polygon_pos, batch.polygon_heading)
        agent_anchors = Anchors(
            batch.agent_pos.reshape(-1, 2),
            batch.agent_heading.reshape(-1),
            batch.agent_step.reshape(-1),
        )

        F_m = embed_attributes(self.point_embed, batch.point_attr)

        F_M = embed_attributes(self.polygon_embed, batch.polygon_attr)
        edges = membership_edges(batch.point_polygon)
        F_M = local_world_attention(self.point_to_polygon, F_M, polygon_anchors, F_m, point_anchors, edges, dt)

        edges = radius_edges(
            batch.polygon_pos, batch.polygon_batch, batch.polygon_pos, batch.polygon_batch,
            cfg.radii.map_map, exclude_self=True,
        )
        F_M = local_world_attention(self.polygon_to_polygon, F_M, polygon_anchors, None, None, edges, dt)

        valid = batch.agent_valid.reshape(-1)
        F_A = embed_attributes(self.agent_embed, batch.agent_attr).reshape(n_agents * t_h, -1)
        edges = causal_temporal_edges(batch.agent_valid, cfg.spans.temporal)
        F_A = local_world_attention(self.temporal, F_A, agent_anchors, None, None, edges, dt)

        scene_of_state = batch.agent_batch.repeat_interleave(t_h)
        edges = radius_edges(
            agent_anchors.pos, scene_of_state, batch.polygon_pos, batch.polygon_batch,
            cfg.radii.map_agent, q_valid=valid,
        )
        F_A = local_world_attention(self.polygon_to_agent, F_A, agent_anchors, F_M, polygon_anchors, edges, dt)

        step_slot = torch.arange(t_h, device=valid.device).repeat(n_agents)
        edges = radius_edges(
            agent_anchors.pos, scene_of_state * t_h + step_slot, agent_anchors.pos, scene_of_state * t_h + step_slot,
            cfg.radii.agent_agent, q_valid=valid, k_valid=valid, exclude_self=True,
        )
        F_A = local_world_attention(self.agent_to_agent, F_A, agent_anchors, None, None, edges, dt)

        return EncodedScene(
            F_A=F_A.reshape(n_agents, t_h, -1),
            F_M=F_M,
            F_m=F_m,
            agent_anchors=agent_anchors,
            polygon_anchors=polygon_anchors,
            point_anchors=point_anchors,
            batch=batch,
        )


def encode_scene(batch: SceneBatch, encoder: SceneEncoder) -> EncodedScene:
    return encoder(batch)
