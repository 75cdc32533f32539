"""Recurrent trajectory decoding, map-query lane occupancy decoding and refinement.

Trajectory queries are flattened as `a * K + k`. Waypoints are produced in the query's
local frame and mapped to the global frame through the query anchor, so the whole
pipeline is equivariant to rigid motions of the scene.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .attention import LocalWorldAttention, init_weights
from .batching import GEOMETRY_DTYPE, SceneBatch, history_to_query_edges, mode_edges, radius_edges
from .encoder import Anchors, EncodedScene, ModelConfig, SceneEncoder, local_world_attention

SCALE_FLOOR = 1e-3
LOF_CLAMP = 1e-7
_EPS_HEADING = 1e-6


@dataclass
class TrajectoryQuerySet:
    features: torch.Tensor
    anchors: Anchors
    step: int

    @property
    def flat(self) -> torch.Tensor:
        return self.features.reshape(-1, self.features.shape[-1])


@dataclass
class MapQuerySet:
    features: torch.Tensor
    anchors: Anchors


@dataclass
class TrajectoryForecast:
    loc: torch.Tensor
    scale: torch.Tensor
    probs: torch.Tensor
    logits: torch.Tensor | None
    proposal_loc: torch.Tensor
    proposal_scale: torch.Tensor


@dataclass
class LaneOccupancyField:
    values: torch.Tensor


def _head(dim: int, out: int) -> nn.Sequential:
    head = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(inplace=True), nn.Linear(dim, out))
    head.apply(init_weights)
    return head


def _rotate(local: torch.Tensor, heading: torch.Tensor) -> torch.Tensor:
    """Rotate local offsets [..., 2] by heading [...] broadcast over trailing steps."""
    c, s = torch.cos(heading), torch.sin(heading)
    x, y = local[..., 0], local[..., 1]
    return torch.stack([c * x - s * y, s * x + c * y], dim=-1)


def to_anchor_frame(points: torch.Tensor, anchors: Anchors) -> torch.Tensor:
    """points [N_q, T, 2] global -> local frame of each query anchor."""
    delta = points - anchors.pos[:, None, :]
    return _rotate(delta, -anchors.heading[:, None])


class _QueryContext:
    """Neighborhoods shared by every query-side stage of one forward pass."""

    def __init__(self, encoded: EncodedScene, config: ModelConfig) -> None:
        batch = encoded.batch
        self.encoded = encoded
        self.config = config
        self.dt = batch.dt
        device = batch.agent_pos.device
        self.query_agent = torch.arange(batch.n_agents, device=device).repeat_interleave(config.K)
        self.query_group = batch.agent_batch[self.query_agent]
        self.query_step = batch.current_step[self.query_agent]
        self.current_valid = batch.agent_valid[:, -1]
        self.current_anchors = Anchors(
            batch.agent_pos[:, -1], batch.agent_heading[:, -1], batch.current_step,
        )
        self.mode_edges = mode_edges(batch.n_agents, config.K, device)

    def anchors(self, pos: torch.Tensor, heading: torch.Tensor) -> Anchors:
        return Anchors(pos, heading, self.query_step)

    def history(self, stage: LocalWorldAttention, x: torch.Tensor, anchors: Anchors) -> torch.Tensor:
        enc, batch = self.encoded, self.encoded.batch
        edges = history_to_query_edges(
            batch.agent_valid, batch.agent_step, self.query_agent, self.query_step, self.config.spans.temporal_tq,
        )
        F_A = enc.F_A.reshape(-1, enc.F_A.shape[-1])
        return local_world_attention(stage, x, anchors, F_A, enc.agent_anchors, edges, self.dt)

    def polygons(self, stage: LocalWorldAttention, x: torch.Tensor, anchors: Anchors) -> torch.Tensor:
        enc, batch = self.encoded, self.encoded.batch
        edges = radius_edges(anchors.pos, self.query_group, batch.polygon_pos, batch.polygon_batch, self.config.radii.map_tq)
        return local_world_attention(stage, x, anchors, enc.F_M, enc.polygon_anchors, edges, self.dt)

    def agents(self, stage: LocalWorldAttention, x: torch.Tensor, anchors: Anchors) -> torch.Tensor:
        enc, batch = self.encoded, self.encoded.batch
        edges = radius_edges(
            anchors.pos, self.query_group, self.current_anchors.pos, batch.agent_batch,
            self.config.radii.agent_tq, k_valid=self.current_valid,
        )
        edges = edges[:, edges[0] != self.query_agent[edges[1]]]
        return local_world_attention(stage, x, anchors, enc.F_A[:, -1], self.current_anchors, edges, self.dt)

    def points(self, stage: LocalWorldAttention, x: torch.Tensor, anchors: Anchors, kv: torch.Tensor) -> torch.Tensor:
        """Map-point features `kv` (encoded points or map queries) into the trajectory queries."""
        enc, batch = self.encoded, self.encoded.batch
        radius = self.config.radii.mq_tq
        edges = radius_edges(anchors.pos, self.query_group, batch.point_pos, batch.point_batch, radius)
        return local_world_attention(stage, x, anchors, kv, enc.point_anchors, edges, self.dt)

    def into_map_queries(self, stage: LocalWorldAttention, mq: MapQuerySet, x: torch.Tensor, anchors: Anchors) -> MapQuerySet:
        batch = self.encoded.batch
        edges = radius_edges(mq.anchors.pos, batch.point_batch, anchors.pos, self.query_group, self.config.radii.tq_mq)
        feats = local_world_attention(stage, mq.features, mq.anchors, x, anchors, edges, self.dt)
        return MapQuerySet(feats, mq.anchors)

    def modes(self, stage: LocalWorldAttention, x: torch.Tensor) -> torch.Tensor:
        return stage(x, None, self.mode_edges)


def _stage(config: ModelConfig, layers: int | None = None, *, use_descriptor: bool = True) -> LocalWorldAttention:
    return LocalWorldAttention(config.D, config.heads, layers or config.layers_main, use_descriptor=use_descriptor)


class QueryInitializer(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.mode_embed = nn.Embedding(config.K, config.D)
        init_weights(self.mode_embed)
        self.temporal = _stage(config)
        self.polygon = _stage(config)
        self.agent = _stage(config)
        self.point = _stage(config)
        self.mode = _stage(config, config.layers_mode, use_descriptor=False)

    def forward(self, ctx: _QueryContext) -> TrajectoryQuerySet:
        n_agents, K = ctx.encoded.batch.n_agents, self.config.K
        x = self.mode_embed.weight[None].expand(n_agents, K, -1).reshape(n_agents * K, -1)
        cur = ctx.current_anchors
        anchors = ctx.anchors(cur.pos[ctx.query_agent], cur.heading[ctx.query_agent])
        x = ctx.history(self.temporal, x, anchors)
        x = ctx.polygons(self.polygon, x, anchors)
        x = ctx.agents(self.agent, x, anchors)
        enc = ctx.encoded
        edges = radius_edges(
            anchors.pos, ctx.query_group, enc.batch.point_pos, enc.batch.point_batch, self.config.radii.point_tq,
        )
        x = local_world_attention(self.point, x, anchors, enc.F_m, enc.point_anchors, edges, ctx.dt)
        x = ctx.modes(self.mode, x)
        return TrajectoryQuerySet(x.reshape(n_agents, K, -1), anchors, step=1)


class FutureContextEncoder(nn.Module):
    """Stages re-encoding the scene around the endpoints of the previous segment."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.temporal = _stage(config)
        self.polygon = _stage(config)
        self.agent = _stage(config)
        self.tq_to_mq = _stage(config)
        self.mq_to_tq = _stage(config)
        self.mode = _stage(config, config.layers_mode, use_descriptor=False)

    def forward(self, ctx: _QueryContext, tq: TrajectoryQuerySet, mq: MapQuerySet) -> tuple[TrajectoryQuerySet, MapQuerySet]:
        cfg = self.config
        anchors = tq.anchors
        x = ctx.history(self.temporal, tq.flat, anchors)
        if cfg.recurrent_map_encoding:
            x = ctx.polygons(self.polygon, x, anchors)
        if cfg.recurrent_social_encoding:
            x = ctx.agents(self.agent, x, anchors)
        if cfg.recurrent_map_encoding or cfg.lof:
            mq = ctx.into_map_queries(self.tq_to_mq, mq, x, anchors)
        if cfg.recurrent_map_encoding:
            x = ctx.points(self.mq_to_tq, x, anchors, mq.features)
        if cfg.recurrent_social_encoding:
            x = ctx.modes(self.mode, x)
        return TrajectoryQuerySet(x.reshape(tq.features.shape), anchors, tq.step), mq


class Refiner(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.gru = nn.GRU(input_size=2, hidden_size=config.D, batch_first=True)
        init_weights(self.gru)
        self.temporal = _stage(config)
        self.polygon = _stage(config)
        self.agent = _stage(config)
        self.map_query = _stage(config)
        self.mode = _stage(config, config.layers_mode, use_descriptor=False)
        self.offset_head = _head(config.D, config.T * 2)
        self.scale_head = _head(config.D, config.T * 2)
        self.logit_head = _head(config.D, 1)


def init_trajectory_queries(ctx: _QueryContext, initializer: QueryInitializer) -> TrajectoryQuerySet:
    return initializer(ctx)


def decode_waypoints(
    tq: TrajectoryQuerySet, loc_head: nn.Module, scale_head: nn.Module
) -> tuple[torch.Tensor, torch.Tensor]:
    """Segment waypoints [N_A, K, seg, 2] in the global frame and their Laplace scales."""
    n_agents, K, _ = tq.features.shape
    local = loc_head(tq.flat).reshape(n_agents * K, -1, 2)
    offsets = _rotate(local.to(GEOMETRY_DTYPE), tq.anchors.heading[:, None])
    waypoints = tq.anchors.pos[:, None, :] + offsets
    scale = F.softplus(scale_head(tq.flat)).reshape(n_agents * K, -1, 2) + SCALE_FLOOR
    seg = local.shape[1]
    return waypoints.reshape(n_agents, K, seg, 2), scale.reshape(n_agents, K, seg, 2)


def reanchor_from_endpoint(waypoints: torch.Tensor, previous: Anchors) -> Anchors:
    """New anchors at the last waypoint of each segment [N_q, seg, 2], heading along the last step."""
    if waypoints.shape[-2] < 2:
        raise ValueError("re-anchoring needs at least two waypoints per segment")
    last, before = waypoints[..., -1, :], waypoints[..., -2, :]
    delta = last - before
    d2 = (delta * delta).sum(-1)
    still = d2 < _EPS_HEADING * _EPS_HEADING
    heading = torch.atan2(
        torch.where(still, torch.zeros_like(delta[..., 1]), delta[..., 1]),
        torch.where(still, torch.ones_like(delta[..., 0]), delta[..., 0]),
    )
    heading = torch.where(still, previous.heading, heading)
    return Anchors(last, heading, previous.step)


def future_context_encode(
    ctx: _QueryContext, tq: TrajectoryQuerySet, mq: MapQuerySet, stages: FutureContextEncoder
) -> tuple[TrajectoryQuerySet, MapQuerySet]:
    return stages(ctx, tq, mq)


def decode_lof_keyframe(mq: MapQuerySet, head: nn.Module) -> torch.Tensor:
    logits = head(mq.features).squeeze(-1)
    return torch.sigmoid(logits).clamp(LOF_CLAMP, 1.0 - LOF_CLAMP)


def refine(
    ctx: _QueryContext,
    proposal: torch.Tensor,
    last_anchors: Anchors,
    mq: MapQuerySet,
    refiner: Refiner,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (global offsets [N_A,K,T,2], probs [N_A,K], refined scales, logits)."""
    cfg = refiner.config
    n_agents, K, T, _ = proposal.shape
    flat = proposal.reshape(n_agents * K, T, 2)
    anchors = reanchor_from_endpoint(flat, last_anchors)
    local = to_anchor_frame(flat, anchors).to(refiner.offset_head[0].weight.dtype)
    _, hidden = refiner.gru(local)
    x = hidden[-1]

    x = ctx.history(refiner.temporal, x, anchors)
    if cfg.recurrent_map_encoding:
        x = ctx.polygons(refiner.polygon, x, anchors)
    if cfg.recurrent_social_encoding:
        x = ctx.agents(refiner.agent, x, anchors)
    if cfg.recurrent_map_encoding:
        x = ctx.points(refiner.map_query, x, anchors, mq.features)
    if cfg.recurrent_social_encoding:
        x = ctx.modes(refiner.mode, x)

    offset_local = refiner.offset_head(x).reshape(n_agents * K, T, 2).to(GEOMETRY_DTYPE)
    offsets = _rotate(offset_local, anchors.heading[:, None]).reshape(n_agents, K, T, 2)
    scale = F.softplus(refiner.scale_head(x)).reshape(n_agents, K, T, 2) + SCALE_FLOOR
    logits = refiner.logit_head(x).reshape(n_agents, K)
    return offsets, torch.softmax(logits, dim=-1), scale, logits


class FutureNet(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        seg = config.segment_length
        self.encoder = SceneEncoder(config)
        self.initializer = QueryInitializer(config)
        self.context = nn.ModuleList(FutureContextEncoder(config) for _ in range(config.n_kf - 1))
        self.loc_heads = nn.ModuleList(_head(config.D, seg * 2) for _ in range(config.n_kf))
        self.scale_heads = nn.ModuleList(_head(config.D, seg * 2) for _ in range(config.n_kf))
        self.final_exchange = _stage(config)
        self.lof_heads = nn.ModuleList(_head(config.D, 1) for _ in range(config.n_kf))
        self.refiner = Refiner(config)

    def forward(self, batch: SceneBatch) -> tuple[TrajectoryForecast, LaneOccupancyField | None]:
        cfg = self.config
        if batch.history_steps != cfg.T_h:
            raise ValueError(f"batch history length {batch.history_steps} differs from T_h={cfg.T_h}")
        encoded = self.encoder(batch)
        ctx = _QueryContext(encoded, cfg)
        n_agents, K = batch.n_agents, cfg.K

        tq = init_trajectory_queries(ctx, self.initializer)
        mq = MapQuerySet(encoded.F_m, encoded.point_anchors)
        segments, scales, rows = [], [], []

        for kf in range(cfg.n_kf):
            if kf > 0:
                anchors = reanchor_from_endpoint(segments[-1].reshape(n_agents * K, -1, 2), tq.anchors)
                tq = TrajectoryQuerySet(tq.features, anchors, step=kf + 1)
                tq, mq = future_context_encode(ctx, tq, mq, self.context[kf - 1])
                if cfg.lof:
                    rows.append(decode_lof_keyframe(mq, self.lof_heads[kf - 1]))
            loc, scale = decode_waypoints(tq, self.loc_heads[kf], self.scale_heads[kf])
            segments.append(loc)
            scales.append(scale)

        proposal = torch.cat(segments, dim=2)
        proposal_scale = torch.cat(scales, dim=2)
        end_anchors = reanchor_from_endpoint(segments[-1].reshape(n_agents * K, -1, 2), tq.anchors)

        if cfg.lof:
            mq = ctx.into_map_queries(self.final_exchange, mq, tq.flat, end_anchors)
            rows.append(decode_lof_keyframe(mq, self.lof_heads[cfg.n_kf - 1]))
            lof = LaneOccupancyField(torch.stack(rows))
        else:
            lof = None

        if cfg.refine:
            offsets, probs, scale, logits = refine(ctx, proposal, tq.anchors, mq, self.refiner)
            forecast = TrajectoryForecast(
                loc=proposal + offsets, scale=scale, probs=probs, logits=logits,
                proposal_loc=proposal, proposal_scale=proposal_scale,
            )
        else:
            probs = torch.full((n_agents, K), 1.0 / K, dtype=proposal_scale.dtype, device=proposal.device)
            forecast = TrajectoryForecast(
                loc=proposal, scale=proposal_scale, probs=probs, logits=None,
                proposal_loc=proposal, proposal_scale=proposal_scale,
            )
        return forecast, lof
