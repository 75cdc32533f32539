from __future__ import annotations

from dataclasses import asdict, dataclass, fields
import logging
import math
from typing import Any, Sequence

import torch

from .decoder import LaneOccupancyField, TrajectoryForecast


class LossNotFiniteError(RuntimeError):
    def __init__(self, part: str, scene_ids: Sequence[str] = ()) -> None:
        self.part = part
        self.scene_ids = list(scene_ids)
        super().__init__(f"loss term {part!r} is not finite (scenes: {', '.join(self.scene_ids) or '-'})")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.8
    beta: float = 1.0
    rho: float = 20.0
    eps: float = 1e-7
    lof_threshold: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0 or self.rho < 0:
            raise ValueError("beta and rho must be >= 0")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.lof_threshold <= 0:
            raise ValueError("lof_threshold must be positive")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LossConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class LossParts:
    propose: torch.Tensor
    refine: torch.Tensor
    cls: torch.Tensor
    lof: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def laplace_nll(loc: torch.Tensor, scale: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.log(2.0 * scale) + (target - loc).abs() / scale


@torch.no_grad()
def wta_select(proposals: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Winner per agent by mean L2 over valid steps; -1 for agents with no valid step.

    proposals [N_A, K, T, 2], gt [N_A, T, 2], valid [N_A, T].
    """
    if valid is None:
        valid = torch.ones(gt.shape[:2], dtype=torch.bool, device=gt.device)
    dist = torch.linalg.norm(proposals - gt[:, None].to(proposals.dtype), dim=-1)
    weight = valid[:, None, :].to(dist.dtype)
    count = valid.sum(-1)
    mean = (dist * weight).sum(-1) / count.clamp(min=1)[:, None].to(dist.dtype)
    # argmin returns the first minimal index
    winners = torch.argmin(mean, dim=-1)
    return torch.where(count > 0, winners, torch.full_like(winners, -1))


def _winner_nll(
    loc: torch.Tensor, scale: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, winners: torch.Tensor
) -> torch.Tensor:
    keep = winners >= 0
    if not bool(keep.any()):
        logging.warning("regression loss over an empty agent set")
        return loc.new_zeros(()) + 0.0 * scale.sum()
    idx = torch.nonzero(keep).squeeze(1)
    best_loc = loc[idx, winners[idx]]
    best_scale = scale[idx, winners[idx]].to(best_loc.dtype)
    nll = laplace_nll(best_loc, best_scale, gt[idx].to(best_loc.dtype))
    mask = valid[idx][..., None].expand_as(nll).to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


def regression_loss(
    forecast: TrajectoryForecast,
    gt: torch.Tensor,
    valid: torch.Tensor,
    winners: torch.Tensor,
    *,
    refined: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    propose = _winner_nll(forecast.proposal_loc, forecast.proposal_scale, gt, valid, winners)
    if not refined:
        return propose, propose.new_zeros(())
    return propose, _winner_nll(forecast.loc, forecast.scale, gt, valid, winners)


def classification_loss(
    probs: torch.Tensor,
    loc: torch.Tensor,
    scale: torch.Tensor,
    gt: torch.Tensor,
    valid: torch.Tensor | None = None,
    *,
    eps: float = 1e-7,
) -> torch.Tensor:
    """Mixture NLL with gradients routed to the mixing coefficients only."""
    if valid is None:
        valid = torch.ones(gt.shape[:2], dtype=torch.bool, device=gt.device)
    keep = valid.any(-1)
    if not bool(keep.any()):
        return probs.new_zeros(()) + 0.0 * probs.sum()
    loc, scale = loc.detach(), scale.detach().to(loc.dtype)
    nll = laplace_nll(loc, scale, gt[:, None].to(loc.dtype))
    mask = valid[:, None, :, None].to(nll.dtype)
    log_density = -(nll * mask).sum(dim=(-1, -2))
    log_p = torch.log(probs.clamp(min=eps)).to(log_density.dtype)
    mixture = torch.logsumexp(log_p + log_density, dim=-1)
    return -mixture[keep].mean()


def lof_loss(predicted: torch.Tensor, labels: torch.Tensor, config: LossConfig) -> torch.Tensor:
    o = predicted.clamp(config.eps, 1.0 - config.eps)
    y = labels.to(o.dtype)
    per = config.alpha * y * torch.log(o) + (1.0 - config.alpha) * (1.0 - y) * torch.log(1.0 - o)
    return -per.mean()


def total_loss(
    propose: torch.Tensor,
    refine: torch.Tensor,
    cls: torch.Tensor,
    lof: torch.Tensor,
    config: LossConfig,
    *,
    scene_ids: Sequence[str] = (),
) -> LossParts:
    parts = {"propose": propose, "refine": refine, "cls": cls, "lof": lof}
    for name, value in parts.items():
        if not math.isfinite(float(value.detach())):
            raise LossNotFiniteError(name, scene_ids)
    dtype = propose.dtype
    total = propose + refine.to(dtype) + config.beta * cls.to(dtype) + config.rho * lof.to(dtype)
    return LossParts(propose=propose, refine=refine, cls=cls, lof=lof, total=total)


def compute_losses(
    forecast: TrajectoryForecast,
    lof: LaneOccupancyField | None,
    gt: torch.Tensor,
    valid: torch.Tensor,
    lof_labels: torch.Tensor | None,
    config: LossConfig,
    *,
    scene_ids: Sequence[str] = (),
) -> LossParts:
    """All terms of one forward pass. Disabled branches contribute exact zeros."""
    refined = forecast.logits is not None
    winners = wta_select(forecast.proposal_loc, gt, valid)
    propose, refine_term = regression_loss(forecast, gt, valid, winners, refined=refined)
    zero = propose.new_zeros(())
    cls = classification_loss(forecast.probs, forecast.loc, forecast.scale, gt, valid, eps=config.eps) if refined else zero
    lof_term = lof_loss(lof.values, lof_labels, config) if lof is not None and lof_labels is not None else zero
    return total_loss(propose, refine_term, cls, lof_term, config, scene_ids=scene_ids)
