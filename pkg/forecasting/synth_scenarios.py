from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import hashlib
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np

from .lof_labels import keyframe_steps, scene_lof_labels
from .scene_model import (
    AgentHistory,
    AgentState,
    MapPoint,
    MapPolygon,
    Pose2,
    Scene,
    dumps_json,
    save_scene,
    wrap_angle,
)

LAYOUTS = ("straight", "curve", "T_intersection", "crossroad")
MAX_SPEED = 20.0
CRUISE_FRACTION = 0.8
MIN_LANE_CHANGE_SPEED = 5.0
MAX_LATERAL_RATE = 0.3
NOISE_RATE = 0.1
NOISE_AR = 0.9


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_agents_range: tuple[int, int] = (2, 8)
    layout: str = "crossroad"
    T_h: int = 10
    T: int = 30
    n_kf: int = 3
    dt: float = 0.1
    point_spacing: float = 2.0
    lane_width: float = 3.5
    speed_range: tuple[float, float] = (2.0, 15.0)
    lane_change_prob: float = 0.3
    stop_and_go_prob: float = 0.2
    lateral_noise: float = 0.1
    road_length: float = 100.0
    arm_length: float = 30.0
    box_half_size: float = 8.0
    curve_radius: float = 60.0
    crosswalks: bool = True
    max_polygons: int = 32
    category_probs: tuple[float, float, float] = (0.85, 0.05, 0.10)

    def __post_init__(self) -> None:
        if self.layout not in LAYOUTS + ("mixed",):
            raise ValueError(f"layout must be one of {LAYOUTS + ('mixed',)}, got {self.layout!r}")
        lo, hi = self.n_agents_range
        if not 1 <= lo <= hi:
            raise ValueError("n_agents_range must satisfy 1 <= min <= max")
        if self.T_h < 2 or self.T < 1:
            raise ValueError("T_h must be >= 2 and T >= 1")
        if self.n_kf < 1 or self.T % self.n_kf != 0:
            raise ValueError(f"T ({self.T}) must be divisible by n_kf ({self.n_kf})")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.point_spacing <= 0:
            raise ValueError("point_spacing must be positive")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        v_lo, v_hi = self.speed_range
        if not 0.0 <= v_lo <= v_hi <= MAX_SPEED:
            raise ValueError(f"speed_range must lie within [0, {MAX_SPEED}]")
        for name in ("lane_change_prob", "stop_and_go_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.lateral_noise < 0:
            raise ValueError("lateral_noise must be >= 0")
        if len(self.category_probs) != 3 or abs(sum(self.category_probs) - 1.0) > 1e-9:
            raise ValueError("category_probs must hold three probabilities summing to 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GenConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown gen config keys: {sorted(unknown)}")
        values = dict(data)
        for key in ("n_agents_range", "speed_range", "category_probs"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Lane:
    polygon_id: str
    centerline: np.ndarray
    headings: np.ndarray
    direction_group: str | None = None


@dataclass(frozen=True)
class Route:
    lanes: tuple[str, ...]
    path: np.ndarray
    headings: np.ndarray
    maneuver: str
    lateral_target: float = 0.0

    @property
    def length(self) -> float:
        return float(_arclength(self.path)[-1])


@dataclass
class LaneGraph:
    layout: str
    polygons: list[MapPolygon] = field(default_factory=list)
    points: list[MapPoint] = field(default_factory=list)
    lanes: dict[str, Lane] = field(default_factory=dict)
    routes: list[Route] = field(default_factory=list)


def _sample_count(length: float, spacing: float) -> int:
    return max(2, int(math.ceil(length / spacing - 1e-9)) + 1)


def _arclength(path: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _left_normal(headings: np.ndarray) -> np.ndarray:
    return np.stack([-np.sin(headings), np.cos(headings)], axis=-1)


def _straight(start: np.ndarray, heading: float, length: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    n = _sample_count(length, spacing)
    s = np.linspace(0.0, length, n)
    direction = np.array([math.cos(heading), math.sin(heading)])
    return start[None, :] + s[:, None] * direction[None, :], np.full(n, heading)


def _arc(center: np.ndarray, radius: float, start_angle: float, sweep: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    n = _sample_count(abs(sweep) * radius, spacing)
    angles = start_angle + np.linspace(0.0, sweep, n)
    path = center[None, :] + radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    headings = angles + math.copysign(math.pi / 2.0, sweep)
    return path, headings


class _GraphBuilder:
    def __init__(self, layout: str, config: GenConfig) -> None:
        self.config = config
        self.graph = LaneGraph(layout=layout)

    def add_polygon(
        self,
        polygon_id: str,
        centerline: np.ndarray,
        headings: np.ndarray,
        *,
        kind: str = "lane",
        direction_group: str | None = None,
    ) -> Lane:
        half = self.config.lane_width / 2.0
        normals = _left_normal(headings)
        wrapped = [wrap_angle(float(h)) for h in headings]
        point_ids: list[str] = []
        for tag, kind_name, offset in (("c", "centerline", 0.0), ("l", "left_boundary", half), ("r", "right_boundary", -half)):
            coords = centerline + offset * normals
            for i, (xy, heading) in enumerate(zip(coords, wrapped)):
                point_id = f"{polygon_id}:{tag}{i}"
                point_ids.append(point_id)
                self.graph.points.append(
                    MapPoint(
                        point_id=point_id,
                        pose=Pose2(float(xy[0]), float(xy[1]), heading),
                        kind=kind_name,
                        polygon_id=polygon_id,
                    )
                )
        entry = centerline[0]
        self.graph.polygons.append(
            MapPolygon(
                polygon_id=polygon_id,
                kind=kind,
                entry_pose=Pose2(float(entry[0]), float(entry[1]), wrapped[0]),
                point_ids=tuple(point_ids),
            )
        )
        lane = Lane(polygon_id, centerline, np.asarray(headings, dtype=float), direction_group)
        if kind == "lane":
            self.graph.lanes[polygon_id] = lane
        return lane

    def add_follow_and_change_routes(self) -> None:
        groups: dict[str, list[Lane]] = {}
        for lane in self.graph.lanes.values():
            self.graph.routes.append(Route((lane.polygon_id,), lane.centerline, lane.headings, "follow"))
            if lane.direction_group is not None:
                groups.setdefault(lane.direction_group, []).append(lane)
        for members in groups.values():
            for src in members:
                for dst in members:
                    if src is dst:
                        continue
                    offset = dst.centerline[0] - src.centerline[0]
                    lateral = float(offset @ _left_normal(src.headings[:1])[0])
                    if abs(abs(lateral) - self.config.lane_width) > 1e-6:
                        continue
                    self.graph.routes.append(
                        Route(
                            (src.polygon_id, dst.polygon_id),
                            src.centerline,
                            src.headings,
                            "lane_change",
                            lateral_target=lateral,
                        )
                    )


def _build_straight(config: GenConfig) -> LaneGraph:
    builder = _GraphBuilder("straight", config)
    w, length = config.lane_width, config.road_length
    for i, y in enumerate((-w / 2.0, -1.5 * w)):
        path, headings = _straight(np.array([0.0, y]), 0.0, length, config.point_spacing)
        builder.add_polygon(f"lane_e{i}", path, headings, direction_group="east")
    for i, y in enumerate((w / 2.0, 1.5 * w)):
        path, headings = _straight(np.array([length, y]), math.pi, length, config.point_spacing)
        builder.add_polygon(f"lane_w{i}", path, headings, direction_group="west")
    builder.add_follow_and_change_routes()
    return builder.graph


def _build_curve(config: GenConfig) -> LaneGraph:
    builder = _GraphBuilder("curve", config)
    w, radius = config.lane_width, config.curve_radius
    sweep = config.road_length / radius
    center = np.zeros(2)
    for i, r in enumerate((radius + w / 2.0, radius + 1.5 * w)):
        path, headings = _arc(center, r, -math.pi / 2.0, sweep, config.point_spacing)
        builder.add_polygon(f"lane_ccw{i}", path, headings, direction_group="ccw")
    for i, r in enumerate((radius - w / 2.0, radius - 1.5 * w)):
        path, headings = _arc(center, r, -math.pi / 2.0 + sweep, -sweep, config.point_spacing)
        builder.add_polygon(f"lane_cw{i}", path, headings, direction_group="cw")
    builder.add_follow_and_change_routes()
    return builder.graph


_ARM_ANGLES = {"west": math.pi, "east": 0.0, "south": -math.pi / 2.0, "north": math.pi / 2.0}


def _right_normal(heading: float) -> np.ndarray:
    return np.array([math.sin(heading), -math.cos(heading)])


def _build_junction(layout: str, arms: tuple[str, ...], config: GenConfig) -> LaneGraph:
    builder = _GraphBuilder(layout, config)
    w, c, length, spacing = config.lane_width, config.box_half_size, config.arm_length, config.point_spacing
    incoming: dict[str, Lane] = {}
    outgoing: dict[str, Lane] = {}

    for arm in arms:
        phi = _ARM_ANGLES[arm]
        outward = np.array([math.cos(phi), math.sin(phi)])
        h_in = wrap_angle(phi + math.pi)
        start_in = (c + length) * outward + (w / 2.0) * _right_normal(h_in)
        path, headings = _straight(start_in, h_in, length, spacing)
        incoming[arm] = builder.add_polygon(f"in_{arm}", path, headings)
        start_out = c * outward + (w / 2.0) * _right_normal(phi)
        path, headings = _straight(start_out, phi, length, spacing)
        outgoing[arm] = builder.add_polygon(f"out_{arm}", path, headings)

    for src in arms:
        for dst in arms:
            if src == dst:
                continue
            lane_in, lane_out = incoming[src], outgoing[dst]
            start, end = lane_in.centerline[-1], lane_out.centerline[0]
            h_in, h_out = float(lane_in.headings[-1]), float(lane_out.headings[0])
            turn = wrap_angle(h_out - h_in)
            if abs(turn) < 1e-6:
                maneuver = "straight"
                path, headings = _straight(start, h_in, float(np.linalg.norm(end - start)), spacing)
            else:
                maneuver = "left" if turn > 0 else "right"
                direction = np.array([math.cos(h_in), math.sin(h_in)])
                radius = abs(float((end - start) @ direction))
                normal = -_right_normal(h_in) if turn > 0 else _right_normal(h_in)
                center = start + radius * normal
                rel = start - center
                path, headings = _arc(center, radius, math.atan2(rel[1], rel[0]), turn, spacing)
            connector = builder.add_polygon(f"conn_{src}_{dst}", path, headings)
            route_path = np.concatenate([lane_in.centerline[:-1], connector.centerline[:-1], lane_out.centerline])
            route_headings = np.unwrap(
                np.concatenate([lane_in.headings[:-1], connector.headings[:-1], lane_out.headings])
            )
            builder.graph.routes.append(
                Route((lane_in.polygon_id, connector.polygon_id, lane_out.polygon_id), route_path, route_headings, maneuver)
            )

    if config.crosswalks:
        for arm in arms:
            phi = _ARM_ANGLES[arm]
            outward = np.array([math.cos(phi), math.sin(phi)])
            across = wrap_angle(phi + math.pi / 2.0)
            start = (c + 2.0) * outward - w * np.array([math.cos(across), math.sin(across)])
            path, headings = _straight(start, across, 2.0 * w, spacing)
            builder.add_polygon(f"crosswalk_{arm}", path, headings, kind="crosswalk")

    for lane in (*incoming.values(), *outgoing.values()):
        builder.graph.routes.append(Route((lane.polygon_id,), lane.centerline, lane.headings, "follow"))
    return builder.graph


def resolve_layout(config: GenConfig) -> str:
    if config.layout == "mixed":
        return LAYOUTS[config.seed % len(LAYOUTS)]
    return config.layout


def build_lane_graph(config: GenConfig) -> LaneGraph:
    layout = resolve_layout(config)
    if layout == "straight":
        graph = _build_straight(config)
    elif layout == "curve":
        graph = _build_curve(config)
    elif layout == "T_intersection":
        graph = _build_junction(layout, ("west", "east", "south"), config)
    else:
        graph = _build_junction(layout, ("west", "east", "south", "north"), config)

    if len(graph.polygons) > config.max_polygons:
        raise ScenarioError(
            f"layout {layout} produces {len(graph.polygons)} polygons, above the cap of {config.max_polygons}"
        )
    return graph


# --- agent kinematics ----------------------------------------------------


def speed_profile(kind: str, v0: float, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Per-step speeds for steps 1..n_steps (index 0 is the pre-history anchor)."""
    speeds = np.full(n_steps + 1, v0, dtype=float)
    if kind != "stop_and_go" or v0 == 0.0:
        return speeds
    n_dec = max(2, n_steps // 6)
    n_stop = max(1, n_steps // 8)
    n_acc = max(2, n_steps // 6)
    earliest = max(1, n_steps // 5)
    latest = max(earliest, min(n_steps - (n_dec + n_stop), n_steps // 2))
    start = int(rng.integers(earliest, latest + 1))
    for k in range(start, n_steps + 1):
        rel = k - start
        if rel < n_dec:
            speeds[k] = v0 * (1.0 - (rel + 1) / n_dec)
        elif rel < n_dec + n_stop:
            speeds[k] = 0.0
        elif rel < n_dec + n_stop + n_acc:
            speeds[k] = v0 * (rel - n_dec - n_stop + 1) / n_acc
    return speeds


def lane_change_offsets(target: float, n_steps: int, start: int, duration: int) -> np.ndarray:
    k = np.arange(n_steps + 1, dtype=float)
    u = np.clip((k - start) / max(duration, 1), 0.0, 1.0)
    return target * 0.5 * (1.0 - np.cos(math.pi * u))


def lateral_noise(arc_steps: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noise = np.zeros(len(arc_steps), dtype=float)
    if sigma <= 0.0:
        return noise
    bound = 3.0 * sigma
    innovation = sigma * math.sqrt(1.0 - NOISE_AR**2)
    noise[0] = float(np.clip(rng.normal(0.0, sigma), -bound, bound))
    for k in range(1, len(arc_steps)):
        eps = float(rng.normal(0.0, innovation))
        limit = NOISE_RATE * float(arc_steps[k])
        target = NOISE_AR * noise[k - 1] + eps
        step = float(np.clip(target - noise[k - 1], -limit, limit))
        noise[k] = float(np.clip(noise[k - 1] + step, -bound, bound))
    return noise


def roll_out(route: Route, s: np.ndarray, lateral: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, velocities and headings along a route; velocity k is the backward difference to k-1."""
    arc = _arclength(route.path)
    x = np.interp(s, arc, route.path[:, 0])
    y = np.interp(s, arc, route.path[:, 1])
    tangent = np.interp(s, arc, np.unwrap(route.headings))
    normals = _left_normal(tangent)
    positions = np.stack([x, y], axis=-1) + lateral[:, None] * normals
    velocities = np.zeros_like(positions)
    velocities[1:] = (positions[1:] - positions[:-1]) / dt
    speeds = np.linalg.norm(velocities, axis=-1)
    headings = np.where(speeds > 0.5, np.arctan2(velocities[:, 1], velocities[:, 0]), tangent)
    return positions, velocities, headings


def _category_speed_cap(category: str) -> float:
    return {"pedestrian": 2.0, "cyclist": 8.0}.get(category, MAX_SPEED)


def simulate_agents(
    lane_graph: LaneGraph, config: GenConfig
) -> tuple[list[AgentHistory], list[tuple[AgentState, ...]], list[str]]:
    rng = np.random.default_rng(config.seed)
    horizon = config.T_h + config.T
    n_agents = int(rng.integers(config.n_agents_range[0], config.n_agents_range[1] + 1))

    histories: list[AgentHistory] = []
    futures: list[tuple[AgentState, ...]] = []
    maneuvers: list[str] = []

    for idx in range(n_agents):
        category = str(rng.choice(["vehicle", "pedestrian", "cyclist"], p=list(config.category_probs)))
        v_hi = min(config.speed_range[1], _category_speed_cap(category))
        v_hi_cruise = CRUISE_FRACTION * v_hi
        v_lo = min(config.speed_range[0], v_hi_cruise)

        wants_change = rng.random() < config.lane_change_prob
        wants_stop = rng.random() < config.stop_and_go_prob
        changes = [r for r in lane_graph.routes if r.maneuver == "lane_change"]
        if wants_change and changes and v_hi_cruise >= max(v_lo, MIN_LANE_CHANGE_SPEED):
            candidates = changes
            v_lo_route = max(v_lo, MIN_LANE_CHANGE_SPEED)
        else:
            candidates = [r for r in lane_graph.routes if r.maneuver != "lane_change"]
            v_lo_route = v_lo

        v0 = float(rng.uniform(v_lo_route, v_hi_cruise)) if v_hi_cruise > v_lo_route else v_lo_route
        travel = v0 * horizon * config.dt
        feasible = [r for r in candidates if r.length >= travel]
        if not feasible:
            fitted = [r for r in candidates if r.length / (horizon * config.dt) * 0.98 >= v_lo_route]
            if not fitted:
                raise ScenarioError(
                    f"no lane long enough for a {horizon}-step horizon in layout {lane_graph.layout}"
                )
            route = fitted[int(rng.integers(len(fitted)))]
            v0 = route.length / (horizon * config.dt) * 0.98
            travel = v0 * horizon * config.dt
        else:
            route = feasible[int(rng.integers(len(feasible)))]

        profile = "cruise"
        if route.maneuver == "lane_change":
            profile = "lane_change"
        elif wants_stop and v0 > 0.0:
            profile = "stop_and_go"
        speeds = speed_profile(profile, v0, horizon, rng)
        steps = speeds * config.dt
        steps[0] = 0.0
        s0 = float(rng.uniform(0.0, max(route.length - travel, 0.0)))
        s = s0 + np.cumsum(steps)

        lateral = np.zeros(horizon + 1)
        if profile == "lane_change":
            duration_s = max(2.0, config.lane_width * math.pi / (2.0 * MAX_LATERAL_RATE * v0))
            duration = int(math.ceil(duration_s / config.dt))
            latest = max(0, horizon - duration)
            start = int(rng.integers(min(config.T_h // 2, latest), latest + 1))
            lateral = lane_change_offsets(route.lateral_target, horizon, start, duration)
        lateral = lateral + lateral_noise(steps, config.lateral_noise, rng)

        positions, velocities, headings = roll_out(route, s, lateral, config.dt)
        states = [
            AgentState(
                pose=Pose2(float(positions[k, 0]), float(positions[k, 1]), wrap_angle(float(headings[k]))),
                vx=float(velocities[k, 0]),
                vy=float(velocities[k, 1]),
                valid=True,
                step_index=k - 1,
            )
            for k in range(1, horizon + 1)
        ]
        histories.append(AgentHistory(agent_id=f"agent{idx}", category=category, states=tuple(states[: config.T_h])))
        futures.append(tuple(states[config.T_h :]))
        maneuvers.append(route.maneuver if profile != "stop_and_go" else "stop_and_go")

    return histories, futures, maneuvers


def generate_scene(config: GenConfig, *, n_keyframes: int | None = None, lof_threshold: float = 2.0) -> Scene:
    layout = resolve_layout(config)
    graph = build_lane_graph(config)
    histories, futures, maneuvers = simulate_agents(graph, config)
    scene = Scene(
        scene_id=f"{layout}-{config.seed:06d}",
        dt=config.dt,
        agents=tuple(histories),
        polygons=tuple(graph.polygons),
        points=tuple(graph.points),
        futures=tuple(futures),
        meta={"layout": layout, "seed": config.seed, "maneuvers": maneuvers},
    )
    if n_keyframes:
        labels = scene_lof_labels(scene, lof_threshold, keyframe_steps(config.T, n_keyframes))
        scene = replace(scene, lof_labels=tuple(tuple(int(v) for v in row) for row in labels))
    return scene


def generate_dataset(
    n_scenes: int,
    config: GenConfig,
    out_dir: str | Path,
    *,
    n_keyframes: int | None = 3,
    lof_threshold: float = 2.0,
) -> dict[str, Any]:
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc

    entries: list[dict[str, Any]] = []
    for index in range(n_scenes):
        scene_config = replace(config, seed=config.seed + index)
        scene = generate_scene(scene_config, n_keyframes=n_keyframes, lof_threshold=lof_threshold)
        file_name = f"scene_{index:05d}.json"
        save_scene(scene, directory / file_name)
        entries.append(
            {
                "scene_id": scene.scene_id,
                "seed": scene_config.seed,
                "layout": scene.meta["layout"],
                "file": file_name,
                "n_agents": len(scene.agents),
                "n_points": len(scene.points),
            }
        )
        logging.debug("Generated scene %s", scene.scene_id, extra={"file": file_name})

    manifest = {
        "n_scenes": n_scenes,
        "seed": config.seed,
        "config": config.to_dict(),
        "lof": {"n_keyframes": n_keyframes, "threshold": lof_threshold},
        "scenes": entries,
    }
    manifest_path = directory / "manifest.json"
    try:
        manifest_path.write_text(dumps_json(manifest), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest_path}: {exc}") from exc
    logging.info("Wrote %d scenes to %s", n_scenes, directory)
    return manifest


def manifest_digest(manifest: dict[str, Any]) -> str:
    return hashlib.sha256(dumps_json(manifest).encode("utf-8")).hexdigest()
