from __future__ import annotations

import os
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scene_model import Scene, scene_arrays  # noqa: E402


def plot_forecast(
    scene: Scene,
    forecast: dict[str, Any] | None,
    out_path: str,
    *,
    keyframe: int | None = None,
) -> dict[str, int]:
    """Render lanes, histories, ground truth and every predicted mode.

    Map points are coloured by the chosen lane occupancy row (last keyframe by default);
    mode line widths scale with probability. Returns the number of drawn primitives.
    """
    arr = scene_arrays(scene)
    counts = {"history_lines": 0, "gt_lines": 0, "trajectory_lines": 0, "lof_points": 0}

    fig, ax = plt.subplots(figsize=(8, 8))
    lof = None
    if forecast is not None and forecast.get("lof"):
        rows = np.asarray(forecast["lof"], dtype=float)
        row = rows.shape[0] - 1 if keyframe is None else keyframe
        if not 0 <= row < rows.shape[0]:
            plt.close(fig)
            raise ValueError(f"keyframe {keyframe} outside 0..{rows.shape[0] - 1}")
        lof = rows[row]

    if len(arr.point_pos):
        if lof is not None:
            sc = ax.scatter(arr.point_pos[:, 0], arr.point_pos[:, 1], c=lof, cmap="viridis", vmin=0.0, vmax=1.0, s=6, zorder=1)
            fig.colorbar(sc, ax=ax, fraction=0.046, pad=0.04, label="occupancy")
            counts["lof_points"] = len(lof)
        else:
            ax.scatter(arr.point_pos[:, 0], arr.point_pos[:, 1], c="#BDBDBD", s=4, zorder=1)

    for a in range(len(scene.agents)):
        hist = arr.agent_pos[a][arr.agent_valid[a]]
        if len(hist):
            ax.plot(hist[:, 0], hist[:, 1], "-", color="black", lw=2, zorder=3)
            ax.scatter(hist[-1, 0], hist[-1, 1], c="green", s=40, marker="o", zorder=4)
            counts["history_lines"] += 1
        if scene.futures:
            gt = arr.future_pos[a][arr.future_valid[a]]
            if len(gt):
                ax.plot(gt[:, 0], gt[:, 1], "b-", lw=2, alpha=0.8, zorder=3)
                counts["gt_lines"] += 1

    if forecast is not None:
        loc = np.asarray(forecast["loc"], dtype=float)
        probs = np.asarray(forecast["probs"], dtype=float)
        for a in range(loc.shape[0]):
            for k in range(loc.shape[1]):
                ax.plot(loc[a, k, :, 0], loc[a, k, :, 1], "r--", lw=0.5 + 3.0 * probs[a, k], alpha=0.8, zorder=2)
                ax.scatter(loc[a, k, -1, 0], loc[a, k, -1, 1], c="red", s=12, marker="x", zorder=2)
                counts["trajectory_lines"] += 1

    ax.set_aspect("equal")
    ax.set_title(scene.scene_id)
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return counts
