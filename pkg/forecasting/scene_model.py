from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
import json
import math
from pathlib import Path
from typing import Any

import numpy as np

AGENT_CATEGORIES = ("vehicle", "pedestrian", "cyclist")
POINT_KINDS = ("centerline", "left_boundary", "right_boundary")
POLYGON_KINDS = ("lane", "crosswalk")


def _modal_length(lengths: list[int]) -> int:
    """Most common length; ties go to the longer one so a truncated sequence is the outlier."""
    if not lengths:
        return 0
    counts = Counter(lengths)
    return max(counts, key=lambda n: (counts[n], n))


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]; -pi maps to pi."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float

    def compose(self, other: Pose2) -> Pose2:
        """Return self ∘ other: other expressed in self's frame, mapped to the world."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2(
            x=c * other.x - s * other.y + self.x,
            y=s * other.x + c * other.y + self.y,
            heading=wrap_angle(self.heading + other.heading),
        )

    def inverse(self) -> Pose2:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2(
            x=-(c * self.x + s * self.y),
            y=-(-s * self.x + c * self.y),
            heading=wrap_angle(-self.heading),
        )


@dataclass(frozen=True)
class AgentState:
    pose: Pose2
    vx: float
    vy: float
    valid: bool
    step_index: int

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    @classmethod
    def masked(cls, step_index: int) -> AgentState:
        return cls(pose=Pose2(0.0, 0.0, 0.0), vx=0.0, vy=0.0, valid=False, step_index=step_index)


@dataclass(frozen=True)
class AgentHistory:
    agent_id: str
    category: str
    states: tuple[AgentState, ...]

    @property
    def current(self) -> AgentState:
        return self.states[-1]


@dataclass(frozen=True)
class MapPoint:
    point_id: str
    pose: Pose2
    kind: str
    polygon_id: str


@dataclass(frozen=True)
class MapPolygon:
    polygon_id: str
    kind: str
    entry_pose: Pose2
    point_ids: tuple[str, ...]


@dataclass(frozen=True)
class Scene:
    scene_id: str
    dt: float
    agents: tuple[AgentHistory, ...]
    polygons: tuple[MapPolygon, ...]
    points: tuple[MapPoint, ...]
    futures: tuple[tuple[AgentState, ...], ...] | None = None
    lof_labels: tuple[tuple[int, ...], ...] | None = None
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def history_steps(self) -> int:
        return _modal_length([len(agent.states) for agent in self.agents])

    @property
    def future_steps(self) -> int:
        if not self.futures:
            return 0
        return _modal_length([len(future) for future in self.futures])


def _transform_pose(pose: Pose2, transform: Pose2, c: float, s: float) -> Pose2:
    return Pose2(
        x=c * pose.x - s * pose.y + transform.x,
        y=s * pose.x + c * pose.y + transform.y,
        heading=wrap_angle(pose.heading + transform.heading),
    )


def _transform_state(state: AgentState, transform: Pose2, c: float, s: float) -> AgentState:
    if not state.valid:
        return state
    return AgentState(
        pose=_transform_pose(state.pose, transform, c, s),
        vx=c * state.vx - s * state.vy,
        vy=s * state.vx + c * state.vy,
        valid=True,
        step_index=state.step_index,
    )


def apply_rigid_transform(scene: Scene, transform: Pose2) -> Scene:
    """Rotate every pose by transform.heading, then translate by (transform.x, transform.y)."""
    if transform.x == 0.0 and transform.y == 0.0 and transform.heading == 0.0:
        return scene

    c, s = math.cos(transform.heading), math.sin(transform.heading)
    agents = tuple(
        replace(agent, states=tuple(_transform_state(st, transform, c, s) for st in agent.states))
        for agent in scene.agents
    )
    polygons = tuple(
        replace(poly, entry_pose=_transform_pose(poly.entry_pose, transform, c, s))
        for poly in scene.polygons
    )
    points = tuple(replace(pt, pose=_transform_pose(pt.pose, transform, c, s)) for pt in scene.points)
    futures = None
    if scene.futures is not None:
        futures = tuple(tuple(_transform_state(st, transform, c, s) for st in fut) for fut in scene.futures)
    return replace(scene, agents=agents, polygons=polygons, points=points, futures=futures)


def _pose_finite(pose: Pose2) -> bool:
    return all(math.isfinite(v) for v in (pose.x, pose.y, pose.heading))


def _heading_ok(heading: float) -> bool:
    return -math.pi < heading <= math.pi


def validate_scene(
    scene: Scene, *, history_steps: int | None = None, future_steps: int | None = None
) -> list[str]:
    violations: list[str] = []

    if scene.dt <= 0 or not math.isfinite(scene.dt):
        violations.append(f"scene {scene.scene_id}: dt must be positive and finite")
    if not scene.agents:
        violations.append(f"scene {scene.scene_id}: needs at least one agent")
    if not scene.polygons:
        violations.append(f"scene {scene.scene_id}: needs at least one polygon")
    if not scene.points:
        violations.append(f"scene {scene.scene_id}: needs at least one map point")

    expected_t_h = history_steps if history_steps is not None else scene.history_steps
    seen_agents: set[str] = set()
    for agent in scene.agents:
        if agent.agent_id in seen_agents:
            violations.append(f"agent {agent.agent_id}: duplicate id")
        seen_agents.add(agent.agent_id)
        if agent.category not in AGENT_CATEGORIES:
            violations.append(f"agent {agent.agent_id}: unknown category {agent.category!r}")
        if len(agent.states) != expected_t_h:
            violations.append(
                f"agent {agent.agent_id}: expected {expected_t_h} history states, got {len(agent.states)}"
            )
        violations.extend(_check_states(f"agent {agent.agent_id}", agent.states))

    points_by_id = {pt.point_id: pt for pt in scene.points}
    if len(points_by_id) != len(scene.points):
        violations.append(f"scene {scene.scene_id}: duplicate map point ids")
    polygons_by_id = {poly.polygon_id: poly for poly in scene.polygons}
    if len(polygons_by_id) != len(scene.polygons):
        violations.append(f"scene {scene.scene_id}: duplicate polygon ids")

    for pt in scene.points:
        if pt.polygon_id not in polygons_by_id:
            violations.append(f"point {pt.point_id}: references missing polygon {pt.polygon_id}")
        if pt.kind not in POINT_KINDS:
            violations.append(f"point {pt.point_id}: unknown kind {pt.kind!r}")
        if not _pose_finite(pt.pose):
            violations.append(f"point {pt.point_id}: non-finite pose")
        elif not _heading_ok(pt.pose.heading):
            violations.append(f"point {pt.point_id}: heading outside (-pi, pi]")

    for poly in scene.polygons:
        if poly.kind not in POLYGON_KINDS:
            violations.append(f"polygon {poly.polygon_id}: unknown kind {poly.kind!r}")
        if not poly.point_ids:
            violations.append(f"polygon {poly.polygon_id}: has no points")
            continue
        missing = [pid for pid in poly.point_ids if pid not in points_by_id]
        if missing:
            violations.append(f"polygon {poly.polygon_id}: references missing points {missing[:3]}")
            continue
        if any(points_by_id[pid].polygon_id != poly.polygon_id for pid in poly.point_ids):
            violations.append(f"polygon {poly.polygon_id}: lists points owned by another polygon")
        centerline = [points_by_id[pid] for pid in poly.point_ids if points_by_id[pid].kind == "centerline"]
        if centerline and centerline[0].pose != poly.entry_pose:
            violations.append(f"polygon {poly.polygon_id}: entry pose differs from first centerline point")

    if scene.futures is not None:
        if len(scene.futures) != len(scene.agents):
            violations.append(
                f"scene {scene.scene_id}: {len(scene.futures)} futures for {len(scene.agents)} agents"
            )
        horizon = future_steps if future_steps is not None else scene.future_steps
        for agent, future in zip(scene.agents, scene.futures):
            if len(future) != horizon:
                violations.append(f"agent {agent.agent_id}: expected {horizon} future states, got {len(future)}")
            violations.extend(_check_states(f"agent {agent.agent_id} future", future))
            if agent.states and future and future[0].step_index != agent.states[-1].step_index + 1:
                violations.append(f"agent {agent.agent_id}: future does not continue the history")

    return violations


def _check_states(label: str, states: tuple[AgentState, ...]) -> list[str]:
    violations: list[str] = []
    for prev, cur in zip(states, states[1:]):
        if cur.step_index != prev.step_index + 1:
            violations.append(f"{label}: step_index not increasing by 1 at {cur.step_index}")
            break
    for st in states:
        if not st.valid:
            continue
        if not _pose_finite(st.pose) or not (math.isfinite(st.vx) and math.isfinite(st.vy)):
            violations.append(f"{label}: non-finite state at step {st.step_index}")
            break
        if not _heading_ok(st.pose.heading):
            violations.append(f"{label}: heading outside (-pi, pi] at step {st.step_index}")
            break
    return violations


# --- JSON scenario format -------------------------------------------------


def _pose_to_dict(pose: Pose2) -> dict[str, float]:
    return {"x": pose.x, "y": pose.y, "heading": pose.heading}


def _pose_from_dict(data: dict[str, Any]) -> Pose2:
    return Pose2(x=float(data["x"]), y=float(data["y"]), heading=float(data["heading"]))


def _state_to_dict(state: AgentState) -> dict[str, Any]:
    return {
        "pose": _pose_to_dict(state.pose),
        "velocity": [state.vx, state.vy],
        "valid": state.valid,
        "step_index": state.step_index,
    }


def _state_from_dict(data: dict[str, Any]) -> AgentState:
    vx, vy = data["velocity"]
    return AgentState(
        pose=_pose_from_dict(data["pose"]),
        vx=float(vx),
        vy=float(vy),
        valid=bool(data["valid"]),
        step_index=int(data["step_index"]),
    )


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "agents": [
            {
                "agent_id": agent.agent_id,
                "category": agent.category,
                "states": [_state_to_dict(st) for st in agent.states],
            }
            for agent in scene.agents
        ],
        "polygons": [
            {
                "polygon_id": poly.polygon_id,
                "kind": poly.kind,
                "entry_pose": _pose_to_dict(poly.entry_pose),
                "point_ids": list(poly.point_ids),
            }
            for poly in scene.polygons
        ],
        "points": [
            {
                "point_id": pt.point_id,
                "pose": _pose_to_dict(pt.pose),
                "kind": pt.kind,
                "polygon_id": pt.polygon_id,
            }
            for pt in scene.points
        ],
        "futures": [[_state_to_dict(st) for st in fut] for fut in scene.futures] if scene.futures else [],
    }
    if scene.lof_labels is not None:
        payload["lof_labels"] = [list(row) for row in scene.lof_labels]
    if scene.meta:
        payload["meta"] = scene.meta
    return payload


def scene_from_dict(data: dict[str, Any]) -> Scene:
    futures_raw = data.get("futures") or []
    labels_raw = data.get("lof_labels")
    return Scene(
        scene_id=str(data["scene_id"]),
        dt=float(data["dt"]),
        agents=tuple(
            AgentHistory(
                agent_id=str(agent["agent_id"]),
                category=str(agent["category"]),
                states=tuple(_state_from_dict(st) for st in agent["states"]),
            )
            for agent in data["agents"]
        ),
        polygons=tuple(
            MapPolygon(
                polygon_id=str(poly["polygon_id"]),
                kind=str(poly["kind"]),
                entry_pose=_pose_from_dict(poly["entry_pose"]),
                point_ids=tuple(str(pid) for pid in poly["point_ids"]),
            )
            for poly in data["polygons"]
        ),
        points=tuple(
            MapPoint(
                point_id=str(pt["point_id"]),
                pose=_pose_from_dict(pt["pose"]),
                kind=str(pt["kind"]),
                polygon_id=str(pt["polygon_id"]),
            )
            for pt in data["points"]
        ),
        futures=tuple(tuple(_state_from_dict(st) for st in fut) for fut in futures_raw) if futures_raw else None,
        lof_labels=tuple(tuple(int(v) for v in row) for row in labels_raw) if labels_raw is not None else None,
        meta=dict(data.get("meta") or {}),
    )


def dumps_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_scene(scene: Scene, path: str | Path) -> None:
    file_path = Path(path)
    try:
        file_path.write_text(dumps_json(scene_to_dict(scene)), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write scene file {file_path}: {exc}") from exc


def load_scene(path: str | Path) -> Scene:
    file_path = Path(path)
    try:
        raw = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read scene file {file_path}: {exc}") from exc
    try:
        return scene_from_dict(json.loads(raw))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed scene file {file_path}: {exc}") from exc


def load_scenes(data_dir: str | Path) -> list[Scene]:
    """Load every scenario JSON in a directory (manifest excluded), sorted by file name."""
    directory = Path(data_dir)
    if not directory.is_dir():
        raise OSError(f"data directory {directory} does not exist")
    files = sorted(p for p in directory.glob("*.json") if p.name != "manifest.json")
    return [load_scene(p) for p in files]


# --- array view -----------------------------------------------------------


@dataclass(frozen=True)
class SceneArrays:
    """Dense numpy view of a Scene; masked agent states stay zero."""

    agent_pos: np.ndarray
    agent_heading: np.ndarray
    agent_vel: np.ndarray
    agent_valid: np.ndarray
    agent_step: np.ndarray
    agent_category: np.ndarray
    future_pos: np.ndarray
    future_valid: np.ndarray
    polygon_pos: np.ndarray
    polygon_heading: np.ndarray
    polygon_kind: np.ndarray
    polygon_length: np.ndarray
    point_pos: np.ndarray
    point_heading: np.ndarray
    point_kind: np.ndarray
    point_polygon: np.ndarray
    point_next: np.ndarray


def _states_to_arrays(rows: list[tuple[AgentState, ...]], length: int) -> tuple[np.ndarray, ...]:
    n = len(rows)
    pos = np.zeros((n, length, 2))
    heading = np.zeros((n, length))
    vel = np.zeros((n, length, 2))
    valid = np.zeros((n, length), dtype=bool)
    step = np.zeros((n, length), dtype=np.int64)
    for a, states in enumerate(rows):
        for t, st in enumerate(states):
            step[a, t] = st.step_index
            if not st.valid:
                continue
            pos[a, t] = (st.pose.x, st.pose.y)
            heading[a, t] = st.pose.heading
            vel[a, t] = (st.vx, st.vy)
            valid[a, t] = True
    return pos, heading, vel, valid, step


def scene_arrays(scene: Scene) -> SceneArrays:
    t_h = scene.history_steps
    agent_pos, agent_heading, agent_vel, agent_valid, agent_step = _states_to_arrays(
        [agent.states for agent in scene.agents], t_h
    )
    horizon = scene.future_steps
    if scene.futures:
        future_pos, _, _, future_valid, _ = _states_to_arrays(list(scene.futures), horizon)
    else:
        future_pos = np.zeros((len(scene.agents), 0, 2))
        future_valid = np.zeros((len(scene.agents), 0), dtype=bool)

    polygon_index = {poly.polygon_id: i for i, poly in enumerate(scene.polygons)}
    point_index = {pt.point_id: i for i, pt in enumerate(scene.points)}
    point_pos = np.array([[pt.pose.x, pt.pose.y] for pt in scene.points], dtype=float).reshape(-1, 2)
    point_next = np.full(len(scene.points), -1, dtype=np.int64)
    polygon_length = np.zeros(len(scene.polygons))
    for m, poly in enumerate(scene.polygons):
        by_kind: dict[str, list[int]] = {}
        for pid in poly.point_ids:
            idx = point_index[pid]
            by_kind.setdefault(scene.points[idx].kind, []).append(idx)
        for members in by_kind.values():
            for cur, nxt in zip(members, members[1:]):
                point_next[cur] = nxt
        center = by_kind.get("centerline", [])
        if len(center) > 1:
            polygon_length[m] = float(np.linalg.norm(np.diff(point_pos[center], axis=0), axis=1).sum())

    return SceneArrays(
        agent_pos=agent_pos,
        agent_heading=agent_heading,
        agent_vel=agent_vel,
        agent_valid=agent_valid,
        agent_step=agent_step,
        agent_category=np.array([AGENT_CATEGORIES.index(a.category) for a in scene.agents], dtype=np.int64),
        future_pos=future_pos,
        future_valid=future_valid,
        polygon_pos=np.array([[p.entry_pose.x, p.entry_pose.y] for p in scene.polygons], dtype=float).reshape(-1, 2),
        polygon_heading=np.array([p.entry_pose.heading for p in scene.polygons], dtype=float),
        polygon_kind=np.array([POLYGON_KINDS.index(p.kind) for p in scene.polygons], dtype=np.int64),
        polygon_length=polygon_length,
        point_pos=point_pos,
        point_heading=np.array([pt.pose.heading for pt in scene.points], dtype=float),
        point_kind=np.array([POINT_KINDS.index(pt.kind) for pt in scene.points], dtype=np.int64),
        point_polygon=np.array([polygon_index[pt.polygon_id] for pt in scene.points], dtype=np.int64),
        point_next=point_next,
    )
