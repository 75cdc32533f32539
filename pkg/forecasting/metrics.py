"""Trajectory, lane occupancy and multi-world evaluation.

Forecast arrays follow one layout everywhere: loc [N_A, K, T, 2], probs [N_A, K],
gt [N_A, T, 2], valid [N_A, T]. An agent is evaluated when its final future step is valid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import json
import logging
import math
import os
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .lof_labels import RENDER_THRESHOLDS, generate_lof_labels, keyframe_steps, render_lof_from_trajectories
from .scene_model import Scene, scene_arrays

MISS_THRESHOLD = 2.0


@dataclass(frozen=True)
class ScenePrediction:
    loc: np.ndarray
    probs: np.ndarray
    lof: np.ndarray | None = None


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 6)
    n_kf: int = 3
    lof_label_threshold: float = 2.0
    iou_thresholds: tuple[float, ...] = (0.5, 0.7)
    render_thresholds: tuple[float, ...] = RENDER_THRESHOLDS
    n_auc_thresholds: int = 100

    def __post_init__(self) -> None:
        if not self.ks or min(self.ks) < 1:
            raise ValueError("ks must hold positive mode counts")
        if self.n_auc_thresholds < 2:
            raise ValueError("n_auc_thresholds must be >= 2")
        for th in self.iou_thresholds:
            if not 0.0 < th < 1.0:
                raise ValueError("iou thresholds must lie in (0, 1)")


def _top_modes(probs: np.ndarray, k: int) -> np.ndarray:
    k = min(k, probs.shape[1])
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


def _evaluated(gt: np.ndarray, valid: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if valid is None:
        valid = np.ones(gt.shape[:2], dtype=bool)
    return np.asarray(valid, dtype=bool), np.asarray(valid, dtype=bool)[:, -1]


def trajectory_errors(
    loc: np.ndarray, probs: np.ndarray, gt: np.ndarray, k: int, valid: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    """Per evaluated agent: best-of-k ADE, FDE, Brier-FDE and miss flag."""
    loc, probs, gt = np.asarray(loc, float), np.asarray(probs, float), np.asarray(gt, float)
    valid, keep = _evaluated(gt, valid)
    top = _top_modes(probs, k)
    rows = np.arange(len(loc))[:, None]
    cand = loc[rows, top]
    dist = np.linalg.norm(cand - gt[:, None], axis=-1)
    steps = valid[:, None, :]
    ade = (dist * steps).sum(-1) / np.maximum(steps.sum(-1), 1)
    fde = dist[..., -1]
    best = np.argmin(fde, axis=1)
    agent = np.arange(len(loc))
    best_fde = fde[agent, best]
    p_best = probs[agent, top[agent, best]]
    return {
        "ade": ade.min(axis=1)[keep],
        "fde": best_fde[keep],
        "brier_fde": (best_fde + (1.0 - p_best) ** 2)[keep],
        "miss": (best_fde > MISS_THRESHOLD)[keep],
    }


def _mean(values: np.ndarray) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def min_ade(loc, probs, gt, k: int, valid=None) -> float:
    return _mean(trajectory_errors(loc, probs, gt, k, valid)["ade"])


def min_fde(loc, probs, gt, k: int, valid=None) -> float:
    return _mean(trajectory_errors(loc, probs, gt, k, valid)["fde"])


def brier_min_fde(loc, probs, gt, k: int, valid=None) -> float:
    return _mean(trajectory_errors(loc, probs, gt, k, valid)["brier_fde"])


def miss_rate(loc, probs, gt, k: int, valid=None) -> float:
    return _mean(trajectory_errors(loc, probs, gt, k, valid)["miss"].astype(float))


def lof_iou(predicted: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    o = np.asarray(predicted, float).reshape(-1)
    y = np.asarray(labels, float).reshape(-1)
    numerator = float(((o > threshold) * y).sum())
    denominator = float((o + y - o * y).sum())
    if denominator == 0.0:
        return 1.0 if numerator == 0.0 else 0.0
    return numerator / denominator


def lof_auc(predicted: np.ndarray, labels: np.ndarray, n_thresholds: int = 100) -> float | None:
    """Area under the precision/recall curve; None when there are no positive labels."""
    o = np.asarray(predicted, float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    recalls, precisions = [0.0], [1.0]
    for th in np.linspace(0.0, 1.0, n_thresholds):
        hit = o > th
        n_hit = int(hit.sum())
        if n_hit == 0:
            continue
        tp = int((hit & y).sum())
        recalls.append(tp / n_pos)
        precisions.append(tp / n_hit)
    order = np.argsort(np.asarray(recalls), kind="stable")
    r = np.asarray(recalls)[order]
    p = np.asarray(precisions)[order]
    return float(np.clip(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) * 0.5), 0.0, 1.0))


def multi_world_metrics(loc: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> dict[str, float]:
    """World k takes mode k of every agent; world probability is uniform 1/K."""
    loc, gt = np.asarray(loc, float), np.asarray(gt, float)
    valid, keep = _evaluated(gt, valid)
    if not keep.any():
        return {"avgMinFDE": float("nan"), "avgMinADE": float("nan"), "avgBrierMinFDE": float("nan"), "actorMR": float("nan")}
    loc, gt, valid = loc[keep], gt[keep], valid[keep]
    K = loc.shape[1]
    dist = np.linalg.norm(loc - gt[:, None], axis=-1)
    steps = valid[:, None, :]
    ade = (dist * steps).sum(-1) / np.maximum(steps.sum(-1), 1)
    fde = dist[..., -1]
    world_fde = fde.mean(axis=0)
    world_ade = ade.mean(axis=0)
    best = int(np.argmin(world_fde))
    return {
        "avgMinFDE": float(world_fde[best]),
        "avgMinADE": float(world_ade.min()),
        "avgBrierMinFDE": float(world_fde[best] + (1.0 - 1.0 / K) ** 2),
        "actorMR": float((fde[:, best] > MISS_THRESHOLD).mean()),
    }


@dataclass
class _Pool:
    errors: dict[str, list[np.ndarray]] = field(default_factory=dict)
    worlds: list[dict[str, float]] = field(default_factory=list)
    lof_pred: list[list[np.ndarray]] = field(default_factory=list)
    lof_true: list[list[np.ndarray]] = field(default_factory=list)
    rendered: dict[float, list[list[np.ndarray]]] = field(default_factory=dict)

    def add(self, key: str, values: np.ndarray) -> None:
        self.errors.setdefault(key, []).append(values)

    def mean(self, key: str) -> float:
        chunks = self.errors.get(key, [])
        if not chunks:
            return float("nan")
        return _mean(np.concatenate(chunks).astype(float))


def _finite_or_none(value: float | None) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return value


def evaluate_dataset(
    forecaster: Callable[[Scene], ScenePrediction],
    scenes: Iterable[Scene],
    config: EvalConfig | None = None,
) -> dict[str, Any]:
    config = config or EvalConfig()
    pool = _Pool()
    failures: list[dict[str, str]] = []
    n_scenes = 0
    keyframes: list[int] | None = None

    for scene in scenes:
        n_scenes += 1
        try:
            if not scene.futures:
                raise ValueError("scene has no ground-truth futures")
            arr = scene_arrays(scene)
            pred = forecaster(scene)
            loc, probs = np.asarray(pred.loc, float), np.asarray(pred.probs, float)
            gt, valid = arr.future_pos, arr.future_valid
            if loc.shape[0] != gt.shape[0] or loc.shape[2] != gt.shape[1]:
                raise ValueError(f"forecast shape {loc.shape} does not match ground truth {gt.shape}")
            keyframes = keyframe_steps(gt.shape[1], config.n_kf)

            for k in config.ks:
                for name, values in trajectory_errors(loc, probs, gt, k, valid).items():
                    pool.add(f"{name}_{k}", values)
                for step in keyframes:
                    errs = trajectory_errors(loc[:, :, :step], probs, gt[:, :step], k, valid[:, :step])
                    pool.add(f"fde_{k}@{step}", errs["fde"])
                    pool.add(f"miss_{k}@{step}", errs["miss"])
            pool.worlds.append(multi_world_metrics(loc, gt, valid))

            labels = generate_lof_labels(gt, valid, arr.point_pos, config.lof_label_threshold, keyframes)
            pool.lof_true.append(list(labels))
            if pred.lof is not None:
                pool.lof_pred.append(list(np.asarray(pred.lof, float)))
            for radius in config.render_thresholds:
                field_ = render_lof_from_trajectories(loc, arr.point_pos, radius, keyframes)
                pool.rendered.setdefault(radius, []).append(list(field_))
        except Exception as exc:
            logging.exception("evaluation failed for scene %s", scene.scene_id)
            failures.append({"scene_id": scene.scene_id, "error": f"{type(exc).__name__}: {exc}"})

    report: dict[str, Any] = {
        "n_scenes": n_scenes,
        "n_failed": len(failures),
        "failures": failures,
        "trajectory": {},
        "lof": {"per_keyframe": [], "baseline_render": {}},
        "multi_world": {},
        "conventions": {"world_probability": "uniform", "top_k_selection": "highest_probability"},
    }
    if n_scenes == len(failures) or keyframes is None:
        return report

    traj: dict[str, Any] = {}
    for k in config.ks:
        traj[f"minADE_{k}"] = _finite_or_none(pool.mean(f"ade_{k}"))
        traj[f"minFDE_{k}"] = _finite_or_none(pool.mean(f"fde_{k}"))
        traj[f"b-minFDE_{k}"] = _finite_or_none(pool.mean(f"brier_fde_{k}"))
        traj[f"MR_{k}"] = _finite_or_none(pool.mean(f"miss_{k}"))
    traj["horizon"] = [
        {
            "step": step,
            **{f"minFDE_{k}": _finite_or_none(pool.mean(f"fde_{k}@{step}")) for k in config.ks},
            **{f"MR_{k}": _finite_or_none(pool.mean(f"miss_{k}@{step}")) for k in config.ks},
        }
        for step in keyframes
    ]
    report["trajectory"] = traj

    worlds = [w for w in pool.worlds if math.isfinite(w["avgMinFDE"])]
    if worlds:
        report["multi_world"] = {
            key: float(np.mean([w[key] for w in worlds])) for key in ("avgMinFDE", "avgMinADE", "avgBrierMinFDE", "actorMR")
        }

    def rows(fields: list[list[np.ndarray]], labels: list[list[np.ndarray]]) -> list[dict[str, Any]]:
        out = []
        for row, step in enumerate(keyframes):
            pred = np.concatenate([f[row] for f in fields])
            true = np.concatenate([t[row] for t in labels])
            entry: dict[str, Any] = {"step": step}
            for th in config.iou_thresholds:
                entry[f"iou@{th:g}"] = lof_iou(pred, true, th)
            entry["auc"] = lof_auc(pred, true, config.n_auc_thresholds)
            out.append(entry)
        return out

    if pool.lof_pred and len(pool.lof_pred) == len(pool.lof_true):
        report["lof"]["per_keyframe"] = rows(pool.lof_pred, pool.lof_true)
    for radius, fields in pool.rendered.items():
        report["lof"]["baseline_render"][f"{radius:g}"] = rows(fields, pool.lof_true)
    return report


def save_report(report: dict[str, Any], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_lof_table(report: dict[str, Any], path: str, iou_thresholds: Sequence[float] | None = None) -> int:
    """Write the learned-vs-rendered LOF grid as CSV; returns the number of data rows."""
    lof = report.get("lof", {})
    sources: list[tuple[str, list[dict[str, Any]]]] = []
    if lof.get("per_keyframe"):
        sources.append(("learned", lof["per_keyframe"]))
    for radius, entries in sorted(lof.get("baseline_render", {}).items(), key=lambda kv: float(kv[0])):
        sources.append((f"render_{radius}m", entries))
    if iou_thresholds is None:
        sample = sources[0][1][0] if sources and sources[0][1] else {}
        columns = sorted(key for key in sample if key.startswith("iou@"))
    else:
        columns = [f"iou@{th:g}" for th in iou_thresholds]

    written = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "step", *columns, "auc"])
        for source, entries in sources:
            for entry in entries:
                auc = entry.get("auc")
                writer.writerow([source, entry["step"], *(f"{entry.get(c, float('nan')):.6f}" for c in columns), "" if auc is None else f"{auc:.6f}"])
                written += 1
    return written
