"""Continuous motion and spatial reasoning.

Turns an annotated state sequence into a fixed-template narrative: one
sentence per consecutive pair of captured states, describing the drone's own
motion and its relation to every object it knows about.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping

from . import geometry as geo
from .capture import AnnotatedStateSequence, AnnotatedStep
from .errors import SequenceTooShort
from .sim import Pose, WorldModel, WorldObject, locate

SAFETY_VALUES = ("clear", "near_obstacle", "inside_zone", "traversing_frame")
OBSTACLE_KINDS = ("Cylinder", "RectObstacle", "Balloon")
NEAR_MARGIN = 0.5
FRAME_SLAB = 0.3
_EPS = 1e-9


@dataclass(frozen=True)
class MotionSemantics:
    behavior_type: str
    displacement: str
    deltas: tuple[float, float, float]
    orientation_change: str
    yaw_delta: float


@dataclass(frozen=True)
class EgoSegment:
    interval: tuple[int, int]  # 1-based step indices into Π
    motion: MotionSemantics
    sentence: str


@dataclass(frozen=True)
class TrackedObject:
    kind: str
    last_pose: tuple[float, float, float]
    last_seen: int | None  # timestamp of the last detection
    visibility: str  # visible | occluded | unseen
    extent: float = 0.0
    height: float = 0.0
    opening: float = 0.0
    yaw: float = 0.0


@dataclass(frozen=True)
class EnvironmentState:
    tracked: Mapping[str, TrackedObject] = field(default_factory=dict)


@dataclass(frozen=True)
class SpatialRelation:
    intent: str
    proximity: str
    distance: float
    safety: str

    def render(self) -> str:
        return f"{self.proximity} ({geo.fmt_num(self.distance, 1)} m), {self.safety}"


@dataclass(frozen=True)
class SemanticTrajectory:
    lines: tuple[str, ...]
    segments: tuple[EgoSegment, ...]
    relations: tuple[tuple[int, tuple[tuple[str, SpatialRelation], ...]], ...]

    @property
    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def to_json(self) -> str:
        doc = {
            "segments": [
                {"interval": list(s.interval), "motion": asdict(s.motion), "sentence": s.sentence}
                for s in self.segments
            ],
            "relations": [
                {"t": t, "objects": {oid: asdict(r) for oid, r in rels}} for t, rels in self.relations
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _nwu(p: tuple[float, ...]) -> str:
    return "NWU(" + ", ".join(geo.fmt_num(v) for v in p[:3]) + ")"


def _deg(v: float) -> str:
    return geo.fmt_num(v) + "°"


# -- ego-motion ----------------------------------------------------------------


def derive_motion(prev: AnnotatedStep, curr: AnnotatedStep) -> MotionSemantics:
    a, b = prev.pose, curr.pose
    deltas = (b.x - a.x, b.y - a.y, b.z - a.z)
    dyaw = geo.wrap180(b.yaw - a.yaw)
    name = curr.action.name
    moved = any(abs(d) > _EPS for d in deltas)

    if not moved:
        displacement = f"held position at {_nwu(b.xyz)}"
    elif name == "FlyToCoordinates":
        displacement = f"fly to coordinate {_nwu(b.xyz)}"
    else:
        # body-relative components in the heading held at the start of the segment
        c, s = geo.cos_sin(a.yaw)
        fwd = deltas[0] * c + deltas[1] * s
        left = -deltas[0] * s + deltas[1] * c
        parts = [(fwd, "forward", "backward"), (left, "left", "right"), (deltas[2], "up", "down")]
        nonzero = [(abs(v), pos if v > 0 else neg) for v, pos, neg in parts if abs(v) > _EPS]
        if len(nonzero) == 1:
            mag, word = nonzero[0]
            displacement = f"move {word} {geo.fmt_num(mag)}m to {_nwu(b.xyz)}"
        else:
            total = math.sqrt(sum(d * d for d in deltas))
            comps = ", ".join(f"{word} {geo.fmt_num(mag)}" for mag, word in nonzero)
            displacement = f"move {geo.fmt_num(total)}m ({comps}) to {_nwu(b.xyz)}"

    if abs(dyaw) <= _EPS:
        orientation = "0°"
    else:
        orientation = ("+" if dyaw > 0 else "") + _deg(dyaw)
    return MotionSemantics(name, displacement, deltas, orientation, dyaw)


def _motion_clause(m: MotionSemantics, heading: float) -> str:
    if abs(m.yaw_delta) <= _EPS:
        return m.displacement
    side = "left" if m.yaw_delta > 0 else "right"
    turn = f"turn {side} with {_deg(abs(m.yaw_delta))} to heading {_deg(heading)}"
    if m.displacement.startswith("held position"):
        return f"{turn}, {m.displacement}"
    return f"{m.displacement} and {turn}"


# -- environment state -----------------------------------------------------------


def initial_environment(world: WorldModel | None) -> EnvironmentState:
    """Known map objects start as `unseen` with their surveyed pose."""
    if world is None:
        return EnvironmentState({})
    return EnvironmentState({o.id: _tracked_from_world(o, "unseen", None) for o in world.objects if o.known})


def _tracked_from_world(o: WorldObject, visibility: str, seen: int | None) -> TrackedObject:
    return TrackedObject(o.kind, o.position, seen, visibility, o.extent, o.height, o.opening, o.yaw)


def update_environment_state(
    env: EnvironmentState, step: AnnotatedStep, world: WorldModel | None = None
) -> EnvironmentState:
    tracked = dict(env.tracked)
    obs = step.data.observation
    seen_now: set[str] = set()
    if obs is not None:
        pose = step.pose
        for det in obs.detected:
            position = locate(pose, det)
            seen_now.add(det.object_id)
            old = tracked.get(det.object_id)
            if old is not None:
                tracked[det.object_id] = replace(
                    old, last_pose=position, last_seen=step.data.state.timestamp, visibility="visible"
                )
                continue
            geom = _geometry_hint(det.object_id, det.kind, position, pose, world)
            tracked[det.object_id] = TrackedObject(
                det.kind, position, step.data.state.timestamp, "visible", *geom
            )
    for oid, entry in tracked.items():
        if oid not in seen_now and entry.visibility == "visible":
            tracked[oid] = replace(entry, visibility="occluded")
    return EnvironmentState(tracked)


def _geometry_hint(
    oid: str, kind: str, position: tuple[float, float, float], pose: Pose, world: WorldModel | None
) -> tuple[float, float, float, float]:
    """(extent, height, opening, yaw) for a newly seen object."""
    if world is not None:
        try:
            o = world.get(oid)
            return o.extent, o.height, o.opening, o.yaw
        except KeyError:
            pass
    # without a map, assume a frame faces the camera that first saw it
    facing = math.degrees(math.atan2(position[1] - pose.y, position[0] - pose.x))
    if kind == "SquareFrame":
        return 0.6, 0.0, 0.4, geo.norm_yaw(facing)
    return 0.2, 0.0, 0.0, 0.0


# -- spatial relations -----------------------------------------------------------


def _proximity(distance: float) -> str:
    if distance < 0.3:
        return "at"
    if distance < 2.0:
        return "within"
    if distance < 5.0:
        return "near"
    return "far"


def object_distance(p: tuple[float, ...], obj: TrackedObject) -> float:
    if obj.kind == "NoFlyZone":
        dx = max(abs(p[0] - obj.last_pose[0]) - obj.extent, 0.0)
        dy = max(abs(p[1] - obj.last_pose[1]) - obj.extent, 0.0)
        return math.hypot(dx, dy)
    return geo.dist(p, obj.last_pose)


def _segment_safety(a: tuple[float, ...], b: tuple[float, ...], obj: TrackedObject) -> str:
    if obj.kind == "NoFlyZone":
        if geo.square_chord(a, b, obj.last_pose, obj.extent) is not None or geo.in_open_square(
            b, obj.last_pose, obj.extent
        ):
            return "inside_zone"
        return "clear"
    if obj.kind == "SquareFrame":
        for _, q in geo.plane_crossings([a, b], obj.last_pose, obj.yaw):
            _, lat, vert = geo.frame_coords(q, obj.last_pose, obj.yaw)
            if abs(lat) <= obj.opening and abs(vert) <= obj.opening:
                return "traversing_frame"
        d, lat, vert = geo.frame_coords(b, obj.last_pose, obj.yaw)
        if abs(d) <= FRAME_SLAB and abs(lat) <= obj.opening and abs(vert) <= obj.opening:
            return "traversing_frame"
        return "clear"
    if obj.kind in OBSTACLE_KINDS:
        r = geo.DRONE_RADIUS + NEAR_MARGIN
        if obj.kind == "Balloon":
            close = geo.dist(b, obj.last_pose) < obj.extent + r
        else:
            horiz = geo.dist2d(b, obj.last_pose)
            if obj.kind == "RectObstacle":
                dx = max(abs(b[0] - obj.last_pose[0]) - obj.extent, 0.0)
                dy = max(abs(b[1] - obj.last_pose[1]) - obj.extent, 0.0)
                horiz = math.hypot(dx, dy) + obj.extent
            close = horiz < obj.extent + r and b[2] < obj.height + r
        return "near_obstacle" if close else "clear"
    return "clear"


def infer_spatial_relation(
    motion: MotionSemantics, pose: Pose, obj: TrackedObject, prev_pose: Pose | None = None
) -> SpatialRelation:
    here = pose.xyz
    start = prev_pose.xyz if prev_pose is not None else tuple(h - d for h, d in zip(here, motion.deltas))
    d_now = object_distance(here, obj)
    d_before = object_distance(start, obj)
    moved = math.sqrt(sum(d * d for d in motion.deltas))
    if moved <= _EPS:
        intent = "holding near"
    elif d_now < d_before - _EPS:
        to_obj = [o - s for o, s in zip(obj.last_pose, start)]
        n = math.sqrt(sum(v * v for v in to_obj))
        cos = 0.0 if n == 0 else sum(m * v for m, v in zip(motion.deltas, to_obj)) / (moved * n)
        intent = "aligning with" if cos >= 0.95 else "approaching"
    elif d_now > d_before + _EPS:
        intent = "departing"
    else:
        intent = "passing"
    return SpatialRelation(intent, _proximity(d_now), d_now, _segment_safety(start, here, obj))


# -- Algorithm 1 ----------------------------------------------------------------------

_SAFETY_PHRASE = {
    "clear": "",
    "near_obstacle": "close to obstacle",
    "inside_zone": "inside no-fly zone",
    "traversing_frame": "traversing square frame",
}

_KIND_LABEL = {
    "NoFlyZone": "no-fly zone",
    "SquareFrame": "square frame",
    "LandingMark": "landing mark",
    "Cylinder": "cylinder",
    "RectObstacle": "rectangular obstacle",
    "Balloon": "balloon",
}


def _action_label(step: AnnotatedStep) -> str:
    params = step.action.params
    if not params:
        return step.action.name
    inner = ", ".join(f"{k}={_param_text(v)}" for k, v in sorted(params.items()))
    return f"{step.action.name}({inner})"


def _param_text(v: Any) -> str:
    if isinstance(v, float):
        return geo.fmt_num(v)
    return str(v)


def _observation_clause(step: AnnotatedStep) -> str:
    obs = step.data.observation
    if obs is None:
        return ""
    if not obs.detected:
        return f"; {obs.camera_axis} camera detected nothing"
    found = ", ".join(
        f"{_KIND_LABEL.get(d.kind, d.kind)} '{d.object_id}' at {_nwu(locate(step.pose, d))} "
        f"(range {geo.fmt_num(d.range, 1)} m)"
        for d in obs.detected
    )
    return f"; {obs.camera_axis} camera detected {found}"


def _relation_clause(rels: list[tuple[str, TrackedObject, SpatialRelation]]) -> str:
    if not rels:
        return ""
    parts = []
    for oid, obj, r in rels:
        safety = _SAFETY_PHRASE[r.safety]
        where = _nwu(obj.last_pose)
        text = f"{r.intent} {_KIND_LABEL.get(obj.kind, obj.kind)} '{oid}' at {where}, {r.proximity} ({geo.fmt_num(r.distance, 1)} m)"
        parts.append(f"{text}, {safety}" if safety else text)
    return " while " + "; ".join(parts)


RelationFn = Callable[[MotionSemantics, Pose, TrackedObject, Pose], SpatialRelation]


def cmsr(
    sequence: AnnotatedStateSequence,
    world: WorldModel | None = None,
    relation_fn: RelationFn = infer_spatial_relation,
) -> SemanticTrajectory:
    """Fuse ego-motion and object relations into a semantic trajectory.

    `relation_fn` is the relation-inference hook; an LLM-backed variant can be
    plugged in here without changing the rest of the pipeline.
    """
    steps = list(sequence)
    if len(steps) < 2:
        raise SequenceTooShort(f"need at least 2 captured states, got {len(steps)}")
    env = update_environment_state(initial_environment(world), steps[0], world)
    segments: list[EgoSegment] = []
    relations: list[tuple[int, tuple[tuple[str, SpatialRelation], ...]]] = []
    for i in range(1, len(steps)):
        prev, curr = steps[i - 1], steps[i]
        motion = derive_motion(prev, curr)
        env = update_environment_state(env, curr, world)
        rel_items = []
        for oid in sorted(env.tracked):
            obj = env.tracked[oid]
            rel_items.append((oid, obj, relation_fn(motion, curr.pose, obj, prev.pose)))
        relations.append((i + 1, tuple((oid, r) for oid, _, r in rel_items)))
        outcome = "" if curr.failure_tag is None else f" [failed: {curr.failure_tag}]"
        sentence = (
            f"During [t_{i}, t_{i + 1}]: {_action_label(curr)}, the drone "
            f"{_motion_clause(motion, curr.pose.yaw)}{_observation_clause(curr)}"
            f"{_relation_clause(rel_items)}{outcome}."
        )
        segments.append(EgoSegment((i, i + 1), motion, sentence))
    return align(segments, relations)


def align(
    segments: list[EgoSegment], relations: list[tuple[int, tuple[tuple[str, SpatialRelation], ...]]]
) -> SemanticTrajectory:
    """Order sentences by interval start; relations are keyed by interval end."""
    ordered = sorted(segments, key=lambda s: s.interval)
    rels = sorted(relations, key=lambda r: r[0])
    return SemanticTrajectory(tuple(s.sentence for s in ordered), tuple(ordered), tuple(rels))
