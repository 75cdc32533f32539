"""Local-world attention over sparse neighborhoods.

Queries attend to keys along an edge list `[2, E]` (row 0 key j, row 1 query i). The
relative descriptor of each edge is embedded and summed into both the key and value
projections, so the attention only ever sees quantities expressed in the query's frame.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .geometry import DESCRIPTOR_DIM


def init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Embedding):
        nn.init.normal_(m.weight, mean=0.0, std=0.02)
    elif isinstance(m, nn.GRU):
        for name, param in m.named_parameters():
            if "weight_ih" in name:
                nn.init.xavier_uniform_(param)
            elif "weight_hh" in name:
                nn.init.orthogonal_(param)
            elif "bias" in name:
                nn.init.zeros_(param)


class MLPEmbedding(nn.Module):
    """Two-layer perceptron used for attribute and descriptor embeddings."""

    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, out_dim),
            nn.LayerNorm(out_dim),
            nn.ReLU(inplace=True),
            nn.Linear(out_dim, out_dim),
        )
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def segment_softmax(logits: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    """Softmax of `logits` [E, H] over the edges sharing the same `index` entry."""
    heads = logits.shape[1]
    expanded = index[:, None].expand(-1, heads)
    peak = torch.full((size, heads), float("-inf"), dtype=logits.dtype, device=logits.device)
    peak = peak.scatter_reduce(0, expanded, logits.detach(), reduce="amax", include_self=True)
    exp = torch.exp(logits - peak[index])
    denom = torch.zeros((size, heads), dtype=logits.dtype, device=logits.device).index_add_(0, index, exp)
    return exp / denom[index]


class LocalWorldAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, *, use_descriptor: bool = True) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"feature width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.use_descriptor = use_descriptor

        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.lin_q = nn.Linear(dim, dim)
        self.lin_k = nn.Linear(dim, dim)
        self.lin_v = nn.Linear(dim, dim)
        if use_descriptor:
            self.norm_rel = nn.LayerNorm(dim)
            self.lin_k_rel = nn.Linear(dim, dim)
            self.lin_v_rel = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.ReLU(inplace=True),
            nn.Linear(dim * 4, dim),
        )
        self.apply(init_weights)

    def forward(
        self,
        x_q: torch.Tensor,
        x_kv: torch.Tensor | None,
        edges: torch.Tensor,
        rel: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """`x_kv=None` means self-attention among the queries. Rows without edges are returned as is."""
        n_q = x_q.shape[0]
        if edges.shape[1] == 0:
            return x_q
        src, dst = edges[0], edges[1]

        q_in = self.norm_q(x_q)
        kv_in = q_in if x_kv is None else self.norm_kv(x_kv)

        shape = (-1, self.heads, self.head_dim)
        query = self.lin_q(q_in)[dst].view(shape)
        key = self.lin_k(kv_in)[src]
        value = self.lin_v(kv_in)[src]
        if self.use_descriptor:
            if rel is None:
                raise ValueError("descriptor embedding required for this layer")
            rel = self.norm_rel(rel)
            key = key + self.lin_k_rel(rel)
            value = value + self.lin_v_rel(rel)
        key = key.view(shape)
        value = value.view(shape)

        logits = (query * key).sum(-1) / math.sqrt(self.head_dim)
        weights = segment_softmax(logits, dst, n_q)
        out = torch.zeros((n_q, self.heads, self.head_dim), dtype=x_q.dtype, device=x_q.device)
        out = out.index_add_(0, dst, value * weights[..., None]).view(n_q, self.dim)

        h = x_q + self.out_proj(out)
        h = h + self.ff(self.norm_ff(h))
        has_edges = torch.zeros(n_q, dtype=torch.bool, device=x_q.device)
        has_edges[dst] = True
        return torch.where(has_edges[:, None], h, x_q)


class LocalWorldAttention(nn.Module):
    """A stage: descriptor embedding shared by `layers` attention layers."""

    def __init__(self, dim: int, heads: int, layers: int, *, use_descriptor: bool = True) -> None:
        super().__init__()
        if layers < 1:
            raise ValueError("an attention stage needs at least one layer")
        self.use_descriptor = use_descriptor
        self.rel_embed = MLPEmbedding(DESCRIPTOR_DIM, dim) if use_descriptor else None
        self.layers = nn.ModuleList(
            LocalWorldAttentionLayer(dim, heads, use_descriptor=use_descriptor) for _ in range(layers)
        )

    def forward(
        self,
        x_q: torch.Tensor,
        x_kv: torch.Tensor | None,
        edges: torch.Tensor,
        channels: torch.Tensor | None = None,
    ) -> torch.Tensor:
        rel = None
        if self.rel_embed is not None and edges.shape[1] > 0:
            if channels is None:
                raise ValueError("descriptor channels required for this stage")
            rel = self.rel_embed(channels.to(x_q.dtype))
        for layer in self.layers:
            x_q = layer(x_q, x_kv, edges, rel)
        return x_q
