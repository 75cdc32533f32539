from __future__ import annotations

from dataclasses import asdict, dataclass, field
import hashlib
import io
import json
import logging
import math
import os
import random
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np
import torch
from tqdm import tqdm

from .batching import collate_scenes
from .decoder import FutureNet
from .encoder import ModelConfig
from .lof_labels import keyframe_steps
from .metrics import ScenePrediction
from .objectives import LossConfig, compute_losses
from .scene_model import Scene

if TYPE_CHECKING:
    from storage import Storage

CHECKPOINT_FORMAT = "futurenet-checkpoint"
CHECKPOINT_VERSION = 1
PRECISIONS = {"single": torch.float32, "double": torch.float64}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ModelConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr0: float = 5e-4
    weight_decay: float = 1e-4
    total_steps: int = 2000
    lr_min: float = 0.0
    seed: int = 0
    grad_clip_norm: float = 1.0
    precision: str = "single"
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.lr_min <= self.lr0:
            raise ValueError("lr_min must lie in [0, lr0]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def lr_schedule(step: int, config: TrainConfig) -> float:
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    cosine = 1.0 + math.cos(math.pi * step / config.total_steps)
    return config.lr_min + 0.5 * (config.lr0 - config.lr_min) * cosine


def seed_everything(seed: int, num_threads: int = 1) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)


def build_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> FutureNet:
    return FutureNet(config).to(dtype)


def make_optimizer(model: FutureNet, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.lr0, weight_decay=config.weight_decay)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(
    path: str,
    model: FutureNet,
    optimizer: torch.optim.Optimizer | None,
    step: int,
    *,
    meta: dict[str, Any] | None = None,
) -> None:
    buffer = io.BytesIO()
    torch.save(
        {"model": model.state_dict(), "optimizer": None if optimizer is None else optimizer.state_dict(), "step": step},
        buffer,
    )
    payload = buffer.getvalue()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "step": step,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def _read_header(fh: io.BufferedReader, path: str) -> dict[str, Any]:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CorruptCheckpointError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint header") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return header


def read_checkpoint_header(path: str) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


@dataclass
class LoadedCheckpoint:
    model: FutureNet
    model_config: ModelConfig
    step: int
    optimizer_state: dict[str, Any] | None
    header: dict[str, Any] = field(default_factory=dict)


def load_checkpoint(path: str, *, expected_config: ModelConfig | None = None) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header says {header.get('payload_bytes')} (truncated?)"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpointError(f"{path}: payload hash mismatch")

    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelConfigMismatchError(f"{path}: stored model config is invalid: {exc}") from exc
    if expected_config is not None and expected_config != config:
        raise ModelConfigMismatchError(f"{path}: checkpoint model config differs from the requested one")

    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    params = state["model"]
    dtype = next((t.dtype for t in params.values() if torch.is_floating_point(t)), torch.float32)
    model = build_model(config, dtype)
    try:
        model.load_state_dict(params)
    except RuntimeError as exc:
        raise ModelConfigMismatchError(f"{path}: parameters do not fit the stored model config: {exc}") from exc
    return LoadedCheckpoint(
        model=model, model_config=config, step=int(state["step"]), optimizer_state=state["optimizer"], header=header,
    )


# --- training -------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    step: int
    history: list[dict[str, float]]


def _batch_stream(n_scenes: int, batch_size: int, seed: int, skip: int) -> Any:
    """Endless deterministic stream of index batches; reshuffled on every pass."""
    rng = np.random.default_rng(seed)
    produced = 0
    while True:
        order = rng.permutation(n_scenes)
        for start in range(0, n_scenes, batch_size):
            if produced >= skip:
                yield order[start : start + batch_size].tolist()
            produced += 1


def train(
    scenes: Sequence[Scene],
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    *,
    out_dir: str,
    resume: str | None = None,
    max_steps: int | None = None,
    storage: Storage | None = None,
    run_id: int | None = None,
    num_threads: int = 1,
    progress: bool = False,
) -> TrainResult:
    if not scenes:
        raise ValueError("training needs at least one scene")
    if any(not scene.futures for scene in scenes):
        raise ValueError("every training scene must carry ground-truth futures")
    for scene in scenes:
        for agent, future in zip(scene.agents, scene.futures):
            if len(agent.states) != model_config.T_h or len(future) != model_config.T:
                raise ValueError(
                    f"scene {scene.scene_id} agent {agent.agent_id} has {len(agent.states)} history and "
                    f"{len(future)} future states; model expects T_h={model_config.T_h}, T={model_config.T}"
                )
    seed_everything(train_config.seed, num_threads)

    start = 0
    if resume:
        loaded = load_checkpoint(resume, expected_config=model_config)
        model = loaded.model.to(train_config.dtype)
        optimizer = make_optimizer(model, train_config)
        if loaded.optimizer_state is not None:
            optimizer.load_state_dict(loaded.optimizer_state)
        start = loaded.step
        logging.info("resuming from %s at step %d", resume, start)
    else:
        model = build_model(model_config, train_config.dtype)
        optimizer = make_optimizer(model, train_config)

    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    end = train_config.total_steps if max_steps is None else min(train_config.total_steps, start + max_steps)
    meta = {"train": train_config.to_dict(), "loss": loss_config.to_dict()}

    stream = _batch_stream(len(scenes), train_config.batch_size, train_config.seed, skip=start)
    history: list[dict[str, float]] = []
    model.train()
    with open(log_path, "a" if resume else "w", encoding="utf-8") as log_fh:
        for step in tqdm(range(start, end), disable=not progress, desc="train"):
            lr = lr_schedule(step, train_config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            picked = [scenes[i] for i in next(stream)]
            batch = collate_scenes(
                picked,
                n_keyframes=model_config.n_kf if model_config.lof else None,
                lof_threshold=loss_config.lof_threshold,
                dtype=train_config.dtype,
            )
            forecast, lof = model(batch)
            parts = compute_losses(
                forecast, lof, batch.future_pos, batch.future_valid, batch.lof_labels, loss_config,
                scene_ids=batch.scene_ids,
            )
            optimizer.zero_grad(set_to_none=True)
            parts.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip_norm)
            optimizer.step()

            values = parts.as_floats()
            record = {
                "step": step + 1,
                "lr": lr,
                "L_propose": values["propose"],
                "L_refine": values["refine"],
                "L_cls": values["cls"],
                "L_lof": values["lof"],
                "total": values["total"],
            }
            history.append(record)
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if storage is not None and run_id is not None:
                storage.log_train_step(run_id, record)
            if (step + 1) % train_config.log_every == 0 or step + 1 == end:
                logging.info("step %d/%d total=%.4f lr=%.2e", step + 1, train_config.total_steps, record["total"], lr)
            if (step + 1) % train_config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, optimizer, step + 1, meta=meta)

    save_checkpoint(checkpoint_path, model, optimizer, end, meta=meta)
    return TrainResult(checkpoint_path=checkpoint_path, log_path=log_path, step=end, history=history)


# --- inference ------------------------------------------------------------


@torch.no_grad()
def run_model(model: FutureNet, scene: Scene) -> dict[str, Any]:
    dtype = next(model.parameters()).dtype
    model.eval()
    batch = collate_scenes([scene], dtype=dtype)
    forecast, lof = model(batch)
    return {
        "loc": forecast.loc.double().numpy(),
        "scale": forecast.scale.double().numpy(),
        "probs": forecast.probs.double().numpy(),
        "proposal_loc": forecast.proposal_loc.double().numpy(),
        "lof": None if lof is None else lof.values.double().numpy(),
    }


def make_forecaster(model: FutureNet) -> Callable[[Scene], ScenePrediction]:
    def forecaster(scene: Scene) -> ScenePrediction:
        out = run_model(model, scene)
        return ScenePrediction(loc=out["loc"], probs=out["probs"], lof=out["lof"])

    return forecaster


def forecast_document(model: FutureNet, scene: Scene) -> dict[str, Any]:
    out = run_model(model, scene)
    horizon = out["loc"].shape[2]
    return {
        "scene_id": scene.scene_id,
        "agent_ids": [agent.agent_id for agent in scene.agents],
        "keyframe_steps": keyframe_steps(horizon, model.config.n_kf),
        "loc": out["loc"].tolist(),
        "scale": out["scale"].tolist(),
        "probs": out["probs"].tolist(),
        "lof": [] if out["lof"] is None else out["lof"].tolist(),
        "proposal_loc": out["proposal_loc"].tolist(),
    }
