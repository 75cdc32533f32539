from __future__ import annotations

import argparse
from dataclasses import asdict, replace
import json
import logging
import os
import sys
from typing import Sequence

from forecasting.ablation import VARIANTS, run_ablation
from forecasting.config import ExperimentConfig, resolve_config
from forecasting.metrics import EvalConfig, evaluate_dataset, export_lof_table, save_report
from forecasting.objectives import LossNotFiniteError
from forecasting.plotting import plot_forecast
from forecasting.scene_model import load_scene, load_scenes
from forecasting.synth_scenarios import LAYOUTS, generate_dataset
from forecasting.training import (
    CheckpointError,
    ModelConfigMismatchError,
    forecast_document,
    load_checkpoint,
    make_forecaster,
    train,
)
from settings import Settings, load_settings
from storage import Storage

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4


class UsageError(Exception):
    pass


def _float_list(value: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from exc


def _int_list(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from exc


def _write_json(path: str, data: object) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _load_nonempty(data_dir: str) -> list:
    scenes = load_scenes(data_dir)
    if not scenes:
        raise UsageError(f"no scenes found in {data_dir}")
    return scenes


def _config(args: argparse.Namespace, settings: Settings) -> ExperimentConfig:
    return resolve_config(getattr(args, "config", None), env_seed=settings.seed, flag_seed=getattr(args, "seed", None))


def cmd_gen(args: argparse.Namespace, settings: Settings) -> int:
    config = _config(args, settings)
    gen = config.gen
    if args.layout:
        gen = replace(gen, layout=args.layout)
    n_kf = args.n_kf if args.n_kf is not None else config.model.n_kf
    manifest = generate_dataset(args.n, gen, args.out, n_keyframes=n_kf, lof_threshold=config.loss.lof_threshold)
    logging.info("generated %d scenes in %s", manifest["n_scenes"], args.out)
    return 0


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    config = _config(args, settings)
    data_dir = args.data or settings.data_dir
    scenes = _load_nonempty(data_dir)
    storage = Storage(args.runs_db or settings.runs_db)
    run_id = storage.create_run("train", config.to_dict(), data_dir=data_dir)
    try:
        result = train(
            scenes,
            config.model,
            config.loss,
            config.train,
            out_dir=args.out,
            resume=args.resume,
            max_steps=args.steps,
            storage=storage,
            run_id=run_id,
            num_threads=settings.num_threads,
            progress=args.progress,
        )
    except Exception as exc:
        storage.finish_run(run_id, "failed", error=f"{type(exc).__name__}: {exc}")
        raise
    storage.finish_run(run_id, "finished", checkpoint_path=result.checkpoint_path)
    logging.info("run %d finished at step %d, checkpoint %s", run_id, result.step, result.checkpoint_path)
    return 0


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    expected = resolve_config(args.config).model if args.config else None
    loaded = load_checkpoint(args.ckpt, expected_config=expected)
    scenes = _load_nonempty(args.data)
    eval_config = EvalConfig(
        ks=tuple(sorted({1, loaded.model_config.K})),
        n_kf=loaded.model_config.n_kf,
        render_thresholds=args.lof_thresholds,
        iou_thresholds=args.iou_thresholds,
    )
    storage = Storage(args.runs_db or settings.runs_db)
    run_id = storage.create_run("eval", {"checkpoint": args.ckpt, "eval": asdict(eval_config)}, data_dir=args.data)
    report = evaluate_dataset(make_forecaster(loaded.model), scenes, eval_config)
    save_report(report, args.report)
    if args.csv:
        export_lof_table(report, args.csv)
    storage.save_eval_report(run_id, report, checkpoint_path=args.ckpt)
    storage.finish_run(run_id, "finished", checkpoint_path=args.ckpt)
    logging.info("evaluated %d scenes (%d failed), report %s", report["n_scenes"], report["n_failed"], args.report)
    return 0


def cmd_predict(args: argparse.Namespace, settings: Settings) -> int:
    loaded = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    _write_json(args.out, forecast_document(loaded.model, scene))
    return 0


def cmd_plot(args: argparse.Namespace, settings: Settings) -> int:
    scene = load_scene(args.scene)
    forecast = None
    if args.forecast:
        with open(args.forecast, "r", encoding="utf-8") as fh:
            forecast = json.load(fh)
    counts = plot_forecast(scene, forecast, args.out, keyframe=args.keyframe)
    logging.info("plotted %s", args.out, extra=counts)
    return 0


def cmd_ablate(args: argparse.Namespace, settings: Settings) -> int:
    config = _config(args, settings)
    train_scenes = _load_nonempty(args.train_data)
    val_scenes = _load_nonempty(args.val_data)
    results = run_ablation(
        train_scenes, val_scenes, args.variants.split(","), args.seeds, config,
        out_dir=args.out, max_steps=args.steps,
    )
    _write_json(os.path.join(args.out, "ablation.json"), results)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="futurenet", description="Motion forecasting with lane occupancy fields")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic scenes")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--layout", choices=LAYOUTS + ("mixed",))
    gen.add_argument("--out", required=True)
    gen.add_argument("--config")
    gen.add_argument("--n-kf", type=int)
    gen.set_defaults(handler=cmd_gen)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", help="scene directory (default: FUTURENET_DATA_DIR)")
    tr.add_argument("--out", required=True)
    tr.add_argument("--config")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--resume")
    tr.add_argument("--steps", type=int, help="limit the number of steps run in this invocation")
    tr.add_argument("--runs-db")
    tr.add_argument("--progress", action="store_true")
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--config", help="fail when the checkpoint was trained with a different model config")
    ev.add_argument("--lof-thresholds", type=_float_list, default=(1.0, 2.0, 3.0, 4.0))
    ev.add_argument("--iou-thresholds", type=_float_list, default=(0.5, 0.7))
    ev.add_argument("--csv")
    ev.add_argument("--runs-db")
    ev.set_defaults(handler=cmd_eval)

    pr = sub.add_parser("predict", help="forecast one scene")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--scene", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(handler=cmd_predict)

    pl = sub.add_parser("plot", help="render a scene and its forecast")
    pl.add_argument("--scene", required=True)
    pl.add_argument("--forecast")
    pl.add_argument("--out", required=True)
    pl.add_argument("--keyframe", type=int)
    pl.set_defaults(handler=cmd_plot)

    ab = sub.add_parser("ablate", help="train and compare model variants")
    ab.add_argument("--train-data", required=True)
    ab.add_argument("--val-data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--config")
    ab.add_argument("--variants", default=",".join(VARIANTS))
    ab.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3, 4))
    ab.add_argument("--steps", type=int)
    ab.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    settings = load_settings()
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        return args.handler(args, settings)
    except (ModelConfigMismatchError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LossNotFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
