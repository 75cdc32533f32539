from __future__ import annotations

from dataclasses import dataclass, field, replace
import json
from typing import Any

from .encoder import ModelConfig
from .objectives import LossConfig
from .synth_scenarios import GenConfig
from .training import TrainConfig

_BLOCKS = ("model", "loss", "train", "gen")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ValueError("experiment config must be a JSON object")
        unknown = set(data) - set(_BLOCKS)
        if unknown:
            raise ValueError(f"unknown config blocks: {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            loss=LossConfig.from_dict(data.get("loss", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            gen=GenConfig.from_dict(data.get("gen", {})),
        )

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name).to_dict() for name in _BLOCKS}

    def with_seed(self, seed: int | None) -> ExperimentConfig:
        if seed is None:
            return self
        return replace(self, train=replace(self.train, seed=seed), gen=replace(self.gen, seed=seed))


def load_experiment_config(path: str | None) -> ExperimentConfig:
    if not path:
        return ExperimentConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def resolve_config(path: str | None, *, env_seed: int | None = None, flag_seed: int | None = None) -> ExperimentConfig:
    """File, then FUTURENET_SEED, then an explicit --seed flag."""
    return load_experiment_config(path).with_seed(env_seed).with_seed(flag_seed)
