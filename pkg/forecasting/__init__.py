from .batching import SceneBatch, collate_scenes
from .config import ExperimentConfig, load_experiment_config, resolve_config
from .decoder import FutureNet, LaneOccupancyField, TrajectoryForecast
from .encoder import EncodedScene, ModelConfig, encode_scene
from .metrics import EvalConfig, ScenePrediction, evaluate_dataset
from .objectives import LossConfig, LossNotFiniteError, compute_losses
from .scene_model import Scene, apply_rigid_transform, load_scene, load_scenes, save_scene
from .synth_scenarios import GenConfig, ScenarioError, generate_dataset, generate_scene
from .training import (
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
    ModelConfigMismatchError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "CheckpointError",
    "CheckpointVersionError",
    "CorruptCheckpointError",
    "EncodedScene",
    "EvalConfig",
    "ExperimentConfig",
    "FutureNet",
    "GenConfig",
    "LaneOccupancyField",
    "LossConfig",
    "LossNotFiniteError",
    "ModelConfig",
    "ModelConfigMismatchError",
    "ScenarioError",
    "Scene",
    "SceneBatch",
    "ScenePrediction",
    "TrainConfig",
    "TrajectoryForecast",
    "apply_rigid_transform",
    "collate_scenes",
    "compute_losses",
    "encode_scene",
    "evaluate_dataset",
    "generate_dataset",
    "generate_scene",
    "load_checkpoint",
    "load_experiment_config",
    "load_scene",
    "load_scenes",
    "resolve_config",
    "save_checkpoint",
    "save_scene",
    "train",
]
