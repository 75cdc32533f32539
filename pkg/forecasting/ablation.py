"""Variant sweeps over the decoder output heads and the recurrent context modules."""
from __future__ import annotations

from dataclasses import replace
import logging
import os
from statistics import median
from typing import Any, Sequence

from .config import ExperimentConfig
from .encoder import ModelConfig
from .metrics import EvalConfig, evaluate_dataset
from .scene_model import Scene
from .training import load_checkpoint, make_forecaster, train

OUTPUT_VARIANTS = ("one_shot", "recurrent", "recurrent_refine", "full")
# full model with one recurrent context module switched off
MODULE_VARIANTS = ("no_recurrent_map", "no_recurrent_social")
VARIANTS = OUTPUT_VARIANTS + MODULE_VARIANTS


def variant_model_config(name: str, base: ModelConfig) -> ModelConfig:
    if name == "one_shot":
        return replace(base, n_kf=1, refine=False, lof=False)
    if name == "recurrent":
        return replace(base, refine=False, lof=False)
    if name == "recurrent_refine":
        return replace(base, refine=True, lof=False)
    if name == "full":
        return replace(base, refine=True, lof=True)
    if name == "no_recurrent_map":
        return replace(base, refine=True, lof=True, recurrent_map_encoding=False)
    if name == "no_recurrent_social":
        return replace(base, refine=True, lof=True, recurrent_social_encoding=False)
    raise ValueError(f"unknown ablation variant {name!r}; expected one of {VARIANTS}")


def _median(values: list[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return median(kept) if kept else None


def run_ablation(
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    variants: Sequence[str],
    seeds: Sequence[int],
    base: ExperimentConfig,
    *,
    out_dir: str,
    max_steps: int | None = None,
    iou_threshold: float = 0.7,
) -> dict[str, Any]:
    if not train_scenes or not val_scenes:
        raise ValueError("ablation needs training and validation scenes")
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    K = base.model.K
    keys = (f"minFDE_{K}", f"minADE_{K}", f"MR_{K}", f"b-minFDE_{K}")
    eval_config = EvalConfig(ks=(1, K), n_kf=base.model.n_kf, lof_label_threshold=base.loss.lof_threshold,
                             iou_thresholds=tuple(sorted({0.5, iou_threshold})))

    results: dict[str, Any] = {"seeds": list(seeds), "variants": {}, "lof_grid": []}
    full_reports: list[dict[str, Any]] = []
    for name in variants:
        model_config = variant_model_config(name, base.model)
        per_seed = []
        for seed in seeds:
            run_dir = os.path.join(out_dir, name, f"seed_{seed}")
            logging.info("ablation: training %s with seed %d", name, seed)
            result = train(
                train_scenes, model_config, base.loss, replace(base.train, seed=seed),
                out_dir=run_dir, max_steps=max_steps,
            )
            model = load_checkpoint(result.checkpoint_path).model
            report = evaluate_dataset(make_forecaster(model), val_scenes, eval_config)
            per_seed.append({"seed": seed, **{key: report["trajectory"].get(key) for key in keys}})
            if name == "full":
                full_reports.append(report)
        results["variants"][name] = {
            "runs": per_seed,
            "median": {key: _median([run[key] for run in per_seed]) for key in keys},
        }

    iou_key = f"iou@{iou_threshold:g}"
    if full_reports:
        n_rows = len(full_reports[0]["lof"]["per_keyframe"])
        for row in range(n_rows):
            learned = _median([r["lof"]["per_keyframe"][row][iou_key] for r in full_reports])
            rendered = {
                radius: _median([r["lof"]["baseline_render"][radius][row][iou_key] for r in full_reports])
                for radius in full_reports[0]["lof"]["baseline_render"]
            }
            results["lof_grid"].append(
                {"step": full_reports[0]["lof"]["per_keyframe"][row]["step"], "learned": learned, "render": rendered}
            )
    return results
