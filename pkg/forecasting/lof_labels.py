"""Lane occupancy field labels and the trajectory-rendered baseline."""
from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .scene_model import Scene

RENDER_THRESHOLDS = (1.0, 2.0, 3.0, 4.0)


def keyframe_steps(horizon: int, n_keyframes: int) -> list[int]:
    """Future step counts (1-based) ending each recurrent segment, e.g. 30/3 -> [10, 20, 30]."""
    if n_keyframes < 1 or horizon % n_keyframes != 0:
        raise ValueError(f"horizon {horizon} is not divisible into {n_keyframes} keyframes")
    seg = horizon // n_keyframes
    return [seg * (k + 1) for k in range(n_keyframes)]


def _occupancy(positions: np.ndarray, valid: np.ndarray, map_points: np.ndarray, threshold: float) -> np.ndarray:
    """positions [..., 2] with matching valid mask; returns [N_m] bool."""
    flat = positions.reshape(-1, 2)[valid.reshape(-1)]
    if flat.size == 0 or map_points.size == 0:
        return np.zeros(len(map_points), dtype=bool)
    d2 = ((map_points[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    return (d2 <= threshold * threshold).any(axis=1)


def generate_lof_labels(
    futures: np.ndarray,
    future_valid: np.ndarray,
    map_points: np.ndarray,
    threshold: float,
    keyframes: Sequence[int],
) -> np.ndarray:
    """futures [N_A, T, 2], future_valid [N_A, T], map_points [N_m, 2] -> uint8 [N_kf, N_m]."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    futures = np.asarray(futures, dtype=float)
    future_valid = np.asarray(future_valid, dtype=bool)
    map_points = np.asarray(map_points, dtype=float).reshape(-1, 2)
    horizon = futures.shape[1]

    labels = np.zeros((len(keyframes), len(map_points)), dtype=np.uint8)
    for row, step in enumerate(keyframes):
        if not 1 <= step <= horizon:
            raise ValueError(f"keyframe step {step} outside the horizon {horizon}")
        labels[row] = _occupancy(futures[:, step - 1], future_valid[:, step - 1], map_points, threshold)
    return labels


def render_lof_from_trajectories(
    trajectories: np.ndarray,
    map_points: np.ndarray,
    render_threshold: float,
    keyframes: Sequence[int],
) -> np.ndarray:
    """Union over every agent and mode. trajectories [N_A, K, T, 2] -> uint8 [N_kf, N_m]."""
    if render_threshold <= 0:
        raise ValueError("render_threshold must be positive")
    trajectories = np.asarray(trajectories, dtype=float)
    map_points = np.asarray(map_points, dtype=float).reshape(-1, 2)
    horizon = trajectories.shape[2]

    field = np.zeros((len(keyframes), len(map_points)), dtype=np.uint8)
    for row, step in enumerate(keyframes):
        if not 1 <= step <= horizon:
            raise ValueError(f"keyframe step {step} outside the horizon {horizon}")
        at_step = trajectories[:, :, step - 1]
        field[row] = _occupancy(at_step, np.ones(at_step.shape[:2], dtype=bool), map_points, render_threshold)
    return field


def scene_lof_labels(scene: Scene, threshold: float, keyframes: Sequence[int]) -> np.ndarray:
    points = np.array([[pt.pose.x, pt.pose.y] for pt in scene.points], dtype=float)
    if not scene.futures:
        return np.zeros((len(keyframes), len(points)), dtype=np.uint8)
    futures = np.array([[[st.pose.x, st.pose.y] for st in fut] for fut in scene.futures], dtype=float)
    valid = np.array([[st.valid for st in fut] for fut in scene.futures], dtype=bool)
    return generate_lof_labels(futures, valid, points, threshold, keyframes)
