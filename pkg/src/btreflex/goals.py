"""Machine-checkable task goals.

Each check inspects a trajectory given as a list of frames (position plus
the index of the captured step it belongs to) together with the captured
steps themselves. The same definitions run on the oracle's view (Π with
interpolated paths) and on the simulator's raw 100 Hz stream, which is what
makes the synthetic failure corpus self-grading.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Mapping, Sequence

from . import geometry as geo
from .capture import AnnotatedStateSequence
from .errors import NoGoalSpec
from .scenes import Scene, load_scene
from .sim import MOTION_ACTIONS, Sample

START = (0.0, 0.0, 0.0)
ORACLE_STEP = 0.05

CAUSES = (
    "not_airborne",
    "route_deviation",
    "route_incomplete",
    "zone_violation",
    "collision",
    "object_not_detected",
    "target_not_reached",
    "frame_not_traversed",
    "not_over_target",
    "not_landed_on_target",
    "executor_fault",
    "timeout",
)

# canonical explanation phrase per cause; explanations are classified back by these
CAUSE_PHRASES = {
    "not_airborne": "moved before taking off",
    "route_deviation": "left the required route",
    "route_incomplete": "did not complete the required route",
    "zone_violation": "entered a no-fly zone",
    "collision": "collided with an obstacle",
    "object_not_detected": "never detected the",
    "target_not_reached": "did not reach the target point",
    "frame_not_traversed": "did not pass through the square frame",
    "not_over_target": "did not fly over the",
    "not_landed_on_target": "did not land on the",
    "executor_fault": "executor fault",
    "timeout": "ran out of time",
}


def classify_explanation(text: str) -> str | None:
    """Map free-text failure explanations back to a cause label (first phrase wins)."""
    low = text.lower()
    hits = [(low.find(p), c) for c, p in CAUSE_PHRASES.items() if p in low]
    return min(hits)[1] if hits else None


@dataclass(frozen=True)
class Frame:
    p: tuple[float, float, float]
    idx: int  # index of the captured step whose action produced this position


def frames_from_sequence(seq: AnnotatedStateSequence, step: float = ORACLE_STEP) -> list[Frame]:
    """Π re-expanded into a dense polyline: each step's path is the straight line from the previous pose."""
    frames = [Frame(START, 0)]
    prev = START
    for i, s in enumerate(seq):
        cur = s.pose.xyz
        for t in geo.segment_params(geo.dist(prev, cur), step):
            frames.append(Frame(tuple(geo.lerp(prev, cur, t)), i))  # type: ignore[arg-type]
        prev = cur
    return frames


def frames_from_samples(samples: Sequence[Sample], seq: AnnotatedStateSequence) -> list[Frame]:
    """Raw simulator samples, each attributed to the step whose action produced it."""
    bounds = [s.data.state.timestamp for s in seq]
    frames, j = [], 0
    for sample in samples:
        while j < len(bounds) - 1 and sample.clock > bounds[j]:
            j += 1
        frames.append(Frame(sample.pose.xyz, j))
    return frames


def landed_before(seq: AnnotatedStateSequence) -> list[bool]:
    """Whether the drone was on the ground when each step started."""
    landed, out = True, []
    for s in seq:
        out.append(landed)
        if s.action.outcome.succeeded:
            if s.action.name == "Takeoff":
                landed = False
            elif s.action.name == "Land":
                landed = True
    return out


def landed_after(seq: AnnotatedStateSequence) -> bool:
    flags = landed_before(seq)
    last = seq[-1]
    if last.action.outcome.succeeded and last.action.name in ("Takeoff", "Land"):
        return last.action.name == "Land"
    return flags[-1]


@dataclass(frozen=True)
class FinalState:
    """What a final-state-only judge sees: last pose, ground contact, latest observation, last tag."""

    pose: tuple[float, float, float]
    landed: bool
    observation_kinds: frozenset[str]
    last_tag: str | None

    @classmethod
    def of(cls, seq: AnnotatedStateSequence) -> FinalState:
        kinds: frozenset[str] = frozenset()
        for s in seq:
            if s.data.observation is not None:
                kinds = frozenset(s.data.observation.kinds())
        return cls(seq[-1].pose.xyz, landed_after(seq), kinds, seq[-1].failure_tag)


@dataclass(frozen=True)
class Violation:
    index: int
    cause: str
    detail: str


@dataclass(frozen=True)
class Check:
    kind: ClassVar[str] = ""

    def evaluate(self, frames: Sequence[Frame], seq: AnnotatedStateSequence) -> Violation | None:
        raise NotImplementedError

    def terminal(self, final: FinalState) -> Violation | None:
        """Judgement from the final state alone (used by the baseline evaluator)."""
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kind"] = self.kind
        return d


def _fmt_xy(p: Sequence[float]) -> str:
    return f"({geo.fmt_num(p[0])}, {geo.fmt_num(p[1])})"


def _last(seq: AnnotatedStateSequence) -> int:
    return len(seq) - 1


@dataclass(frozen=True)
class Airborne(Check):
    kind: ClassVar[str] = "airborne"

    def evaluate(self, frames, seq):
        for i, (s, landed) in enumerate(zip(seq, landed_before(seq))):
            if landed and s.action.name in MOTION_ACTIONS:
                return Violation(i, "not_airborne", f"The drone {CAUSE_PHRASES['not_airborne']}: {s.action.name} at step {i} ran while still on the ground.")
        return None

    def terminal(self, final):
        return None

    def describe(self) -> str:
        return "take off before moving"


@dataclass(frozen=True)
class Route(Check):
    """Fly the waypoint polyline in order; any alternative may be satisfied."""

    kind: ClassVar[str] = "route"
    alternatives: tuple[tuple[tuple[float, float], ...], ...] = ()
    tol: float = 0.3

    def _follow(self, frames: Sequence[Frame], wps: Sequence[tuple[float, float]], last: int) -> tuple[int, str, str] | None:
        seg = 0
        n = len(wps)
        for f in frames:
            while seg < n - 1 and geo.dist2d(f.p, wps[seg + 1]) <= self.tol:
                seg += 1
            if seg == n - 1:
                off = geo.dist2d(f.p, wps[-1])
            else:
                off = geo.point_segment_dist2d(f.p, wps[seg], wps[seg + 1])[0]
            if off > self.tol + 1e-9:
                target = wps[min(seg + 1, n - 1)]
                return f.idx, "route_deviation", f"heading for waypoint {_fmt_xy(target)} it strayed {geo.fmt_num(off)} m off the route"
        if seg < n - 1:
            return last, "route_incomplete", f"waypoint {_fmt_xy(wps[seg + 1])} was never reached"
        return None

    def evaluate(self, frames, seq):
        results = [self._follow(frames, wps, _last(seq)) for wps in self.alternatives]
        if any(r is None for r in results):
            return None
        idx, cause, detail = max(results, key=lambda r: r[0])  # type: ignore[arg-type,return-value]
        return Violation(idx, cause, f"The drone {CAUSE_PHRASES[cause]} at step {idx}: {detail}.")

    def terminal(self, final):
        if any(geo.dist2d(final.pose, wps[-1]) <= self.tol for wps in self.alternatives):
            return None
        return Violation(-1, "route_incomplete", f"The drone {CAUSE_PHRASES['route_incomplete']}: it ended away from the final waypoint.")

    def describe(self) -> str:
        opts = " or ".join(" -> ".join(_fmt_xy(w) for w in wps) for wps in self.alternatives)
        return f"follow the route {opts} within {geo.fmt_num(self.tol)} m"

    def to_dict(self):
        return {"kind": self.kind, "alternatives": [[list(w) for w in wps] for wps in self.alternatives], "tol": self.tol}


@dataclass(frozen=True)
class AvoidZones(Check):
    kind: ClassVar[str] = "avoid_zones"
    cells: tuple[tuple[float, float], ...] = ()
    half: float = 0.5

    def _zone_at(self, p: Sequence[float]) -> tuple[float, float] | None:
        return next((c for c in self.cells if geo.in_open_square(p, c, self.half)), None)

    def evaluate(self, frames, seq):
        for f in frames:
            cell = self._zone_at(f.p)
            if cell is not None:
                return Violation(f.idx, "zone_violation", f"The drone {CAUSE_PHRASES['zone_violation']} {_fmt_xy(cell)} during step {f.idx} ({seq[f.idx].action.name}).")
        return None

    def terminal(self, final):
        cell = self._zone_at(final.pose)
        if cell is None:
            return None
        return Violation(-1, "zone_violation", f"The drone {CAUSE_PHRASES['zone_violation']} {_fmt_xy(cell)}.")

    def describe(self) -> str:
        return "stay out of the no-fly zones " + ", ".join(_fmt_xy(c) for c in self.cells)

    def to_dict(self):
        return {"kind": self.kind, "cells": [list(c) for c in self.cells], "half": self.half}


@dataclass(frozen=True)
class NoCollision(Check):
    kind: ClassVar[str] = "no_collision"

    def evaluate(self, frames, seq):
        for i, s in enumerate(seq):
            if s.failure_tag == "collision":
                return Violation(i, "collision", f"The drone {CAUSE_PHRASES['collision']} during step {i} ({s.action.name}).")
        return None

    def terminal(self, final):
        if final.last_tag == "collision":
            return Violation(-1, "collision", f"The drone {CAUSE_PHRASES['collision']}.")
        return None

    def describe(self) -> str:
        return "do not collide with anything"


@dataclass(frozen=True)
class FinalPosition(Check):
    kind: ClassVar[str] = "final_position"
    target: tuple[float, float] = (0.0, 0.0)
    tol: float = 0.3

    def _check(self, p: Sequence[float], idx: int) -> Violation | None:
        d = geo.dist2d(p, self.target)
        if d <= self.tol:
            return None
        return Violation(idx, "target_not_reached", f"The drone {CAUSE_PHRASES['target_not_reached']} {_fmt_xy(self.target)}: it ended {geo.fmt_num(d)} m away.")

    def evaluate(self, frames, seq):
        return self._check(seq[-1].pose.xyz, _last(seq))

    def terminal(self, final):
        return self._check(final.pose, -1)

    def describe(self) -> str:
        return f"end within {geo.fmt_num(self.tol)} m of {_fmt_xy(self.target)}"


@dataclass(frozen=True)
class ObjectDetected(Check):
    kind: ClassVar[str] = "object_detected"
    object_kind: str = "Balloon"

    def evaluate(self, frames, seq):
        first_miss = None
        for i, s in enumerate(seq):
            obs = s.data.observation
            if obs is None:
                continue
            if self.object_kind in obs.kinds():
                return None
            if first_miss is None and str(s.action.params.get("kind")) == self.object_kind:
                first_miss = i
        idx = _last(seq) if first_miss is None else first_miss
        return Violation(idx, "object_not_detected", f"The drone {CAUSE_PHRASES['object_not_detected']} {self.object_kind}; the first failed look was step {idx}.")

    def terminal(self, final):
        if self.object_kind in final.observation_kinds:
            return None
        return Violation(-1, "object_not_detected", f"The drone {CAUSE_PHRASES['object_not_detected']} {self.object_kind}.")

    def describe(self) -> str:
        return f"detect a {self.object_kind}"


@dataclass(frozen=True)
class PassesOver(Check):
    kind: ClassVar[str] = "passes_over"
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.3
    altitude: float = 1.0
    tol: float = 0.2
    label: str = "cylinder"

    def evaluate(self, frames, seq):
        over = False
        for f in frames:
            if geo.dist2d(f.p, self.center) <= self.radius:
                if abs(f.p[2] - self.altitude) > self.tol:
                    return Violation(f.idx, "not_over_target", f"The drone {CAUSE_PHRASES['not_over_target']} {self.label} at {geo.fmt_num(self.altitude)} m: it crossed above it at {geo.fmt_num(f.p[2])} m during step {f.idx}.")
                over = True
        if over:
            return None
        return Violation(_last(seq), "not_over_target", f"The drone {CAUSE_PHRASES['not_over_target']} {self.label} at {_fmt_xy(self.center)}.")

    def terminal(self, final):
        return None  # the path is not visible in a final state

    def describe(self) -> str:
        return f"pass over {_fmt_xy(self.center)} at {geo.fmt_num(self.altitude)} m"


@dataclass(frozen=True)
class TraverseFrame(Check):
    kind: ClassVar[str] = "traverse_frame"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    opening: float = 0.4

    def evaluate(self, frames, seq):
        points = [f.p for f in frames]
        for _, q in geo.plane_crossings(points, self.center, self.yaw):
            _, lat, vert = geo.frame_coords(q, self.center, self.yaw)
            if abs(lat) <= self.opening and abs(vert) <= self.opening:
                return None
        return Violation(_last(seq), "frame_not_traversed", f"The drone {CAUSE_PHRASES['frame_not_traversed']} at {_fmt_xy(self.center)}.")

    def terminal(self, final):
        if geo.frame_coords(final.pose, self.center, self.yaw)[0] > 0:
            return None
        return Violation(-1, "frame_not_traversed", f"The drone {CAUSE_PHRASES['frame_not_traversed']}.")

    def describe(self) -> str:
        return f"fly through the square frame at {_fmt_xy(self.center)}"

    def to_dict(self):
        return {"kind": self.kind, "center": list(self.center), "yaw": self.yaw, "opening": self.opening}


@dataclass(frozen=True)
class LandedOn(Check):
    kind: ClassVar[str] = "landed_on"
    target: tuple[float, float] = (0.0, 0.0)
    tol: float = 0.3

    def _check(self, p: Sequence[float], landed: bool, idx: int) -> Violation | None:
        d = geo.dist2d(p, self.target)
        if landed and d <= self.tol:
            return None
        why = "it is still airborne" if not landed else f"it landed {geo.fmt_num(d)} m away"
        return Violation(idx, "not_landed_on_target", f"The drone {CAUSE_PHRASES['not_landed_on_target']} landing mark at {_fmt_xy(self.target)}: {why}.")

    def evaluate(self, frames, seq):
        return self._check(seq[-1].pose.xyz, landed_after(seq), _last(seq))

    def terminal(self, final):
        return self._check(final.pose, final.landed, -1)

    def describe(self) -> str:
        return f"land within {geo.fmt_num(self.tol)} m of {_fmt_xy(self.target)}"


CHECK_TYPES: dict[str, type[Check]] = {
    c.kind: c
    for c in (Airborne, Route, AvoidZones, NoCollision, FinalPosition, ObjectDetected, PassesOver, TraverseFrame, LandedOn)
}


def check_from_dict(d: Mapping[str, Any]) -> Check:
    d = dict(d)
    cls = CHECK_TYPES[d.pop("kind")]
    if cls is Route:
        return Route(tuple(tuple(tuple(w) for w in wps) for wps in d["alternatives"]), d.get("tol", 0.3))
    if cls is AvoidZones:
        return AvoidZones(tuple(tuple(c) for c in d["cells"]), d.get("half", 0.5))
    for key in ("target", "center"):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)


@dataclass(frozen=True)
class TaskGoalSpec:
    task_id: int
    instruction: str
    checks: tuple[Check, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        return {"task_id": self.task_id, "instruction": self.instruction, "checks": [c.to_dict() for c in self.checks]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TaskGoalSpec:
        return cls(int(d["task_id"]), d["instruction"], tuple(check_from_dict(c) for c in d["checks"]))


def goal_for(scene: Scene) -> TaskGoalSpec:
    """Checks for a benchmark scene. Every spec starts with the take-off-first check."""
    t = scene.task_id
    world = scene.world
    zones = tuple((o.position[0], o.position[1]) for o in world.of_kind("NoFlyZone"))
    checks: list[Check] = [Airborne()]
    if t == 1:
        checks.append(Route((((0.0, 0.0), (2.0, 0.0), (2.0, 2.0)),)))
    elif t == 2:
        cw = ((0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0), (0.0, 0.0))
        ccw = ((0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0), (0.0, 0.0))
        checks.append(Route((cw, ccw)))
    elif t == 3:
        checks += [AvoidZones(zones), FinalPosition((4.0, 1.0))]
    elif t in (4, 5, 6):
        checks.append(ObjectDetected({4: "Balloon", 5: "SquareFrame", 6: "LandingMark"}[t]))
    elif t == 7:
        (cyl,) = world.of_kind("Cylinder")
        checks.append(PassesOver((cyl.position[0], cyl.position[1]), cyl.extent, 1.0, 0.2))
    elif t == 8:
        checks += [NoCollision(), FinalPosition((2.0, 0.0))]
    elif t in (9, 10):
        (frame,) = world.of_kind("SquareFrame")
        if t == 10:
            checks.append(ObjectDetected("SquareFrame"))
        checks += [TraverseFrame(frame.position, frame.yaw, frame.opening), NoCollision()]
    elif t == 11:
        (mark,) = world.of_kind("LandingMark")
        checks += [AvoidZones(zones), LandedOn((mark.position[0], mark.position[1]))]
    else:
        raise NoGoalSpec(f"no goal spec for task {t}")
    return TaskGoalSpec(t, scene.instruction, tuple(checks))


def goal_for_task(task_id: int, seed: int = 0) -> TaskGoalSpec:
    return goal_for(load_scene(task_id, seed))


def first_violation(goal: TaskGoalSpec, frames: Sequence[Frame], seq: AnnotatedStateSequence) -> Violation | None:
    """Earliest violated step over all checks; ties go to the earlier-listed check."""
    best: Violation | None = None
    for check in goal.checks:
        v = check.evaluate(frames, seq)
        if v is not None and (best is None or v.index < best.index):
            best = v
    return best


def ground_truth_violation(goal: TaskGoalSpec, seq: AnnotatedStateSequence, samples: Sequence[Sample]) -> Violation | None:
    return first_violation(goal, frames_from_samples(samples, seq), seq)


__all__ = [name for name in dir() if not name.startswith("_")]
