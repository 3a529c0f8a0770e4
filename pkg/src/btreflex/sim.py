"""Deterministic kinematic drone simulator in the NWU frame.

Motions are teleport-with-path: the pose moves along a straight line (or
rotates in place) and the path is tested against the world at a fixed
spatial resolution. Time advances on a 100 Hz internal clock whose samples
are kept as the raw high-rate stream that state capture filters down.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

from . import geometry as geo
from .bt import Blackboard, Node, TickStatus
from .errors import ExecutorFault, UnknownAction
from .vocabulary import ACTIONS, CAPTURE_ACTIONS, CONDITIONS

FAILURE_TAGS = ("zone_violation", "collision", "detect_miss", "timeout", "executor_fault")

H_SPEED = 0.5  # m/s, along any straight-line path
YAW_RATE = 30.0  # deg/s
DETECT_TIME = 1.0  # s
RATE_HZ = 100

FORWARD_HALF_ANGLE = 60.0
FORWARD_RANGE = 4.0
DOWNWARD_RADIUS = 2.0

MOTION_ACTIONS = frozenset(
    {"FlyToCoordinates", "MoveForward", "MoveBackward", "MoveLeft", "MoveRight", "TurnLeft", "TurnRight", "Hover"}
)


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    @property
    def xyz(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def rounded(self) -> Pose:
        return Pose(
            round(self.x, geo.ROUND) + 0.0,
            round(self.y, geo.ROUND) + 0.0,
            round(self.z, geo.ROUND) + 0.0,
            geo.norm_yaw(self.yaw),
        )

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Pose:
        return cls(float(d["x"]), float(d["y"]), float(d["z"]), float(d.get("yaw", 0.0)))


@dataclass(frozen=True)
class WorldObject:
    """One scene entity.

    NoFlyZone: `position` is the cell center, `extent` the half side (cells are
    unbounded in z). Cylinder: `extent` is the radius. RectObstacle: `extent`
    is the half side of its square footprint. SquareFrame: `extent` is the
    outer half side, `opening` the inner half side, `yaw` the facing direction.
    `known` marks map priors the drone is told about in advance.
    """

    id: str
    kind: str
    position: tuple[float, float, float]
    extent: float
    height: float = 0.0
    opening: float = 0.0
    yaw: float = 0.0
    known: bool = True

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["position"] = list(self.position)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> WorldObject:
        d = dict(d)
        d["position"] = tuple(float(v) for v in d["position"])
        return cls(**d)


OBJECT_KINDS = ("Balloon", "SquareFrame", "LandingMark", "Cylinder", "RectObstacle", "NoFlyZone")


@dataclass(frozen=True)
class WorldModel:
    objects: tuple[WorldObject, ...] = ()
    bounds: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = ((-6.0, 6.0), (-6.0, 6.0), (0.0, 4.0))

    def __post_init__(self) -> None:
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate object ids in {ids}")
        for o in self.objects:
            if o.kind not in OBJECT_KINDS:
                raise ValueError(f"unknown object kind {o.kind!r}")
            if o.extent <= 0:
                raise ValueError(f"object {o.id} has non-positive extent")

    def of_kind(self, kind: str) -> list[WorldObject]:
        return [o for o in self.objects if o.kind == kind]

    def get(self, object_id: str) -> WorldObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def to_dict(self) -> dict[str, Any]:
        return {"objects": [o.to_dict() for o in self.objects], "bounds": [list(b) for b in self.bounds]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> WorldModel:
        bounds = tuple(tuple(float(v) for v in b) for b in d.get("bounds", cls().bounds))
        return cls(tuple(WorldObject.from_dict(o) for o in d.get("objects", ())), bounds)  # type: ignore[arg-type]


@dataclass(frozen=True)
class Detection:
    object_id: str
    kind: str
    bearing: float  # degrees relative to heading, (-180, 180], CCW positive
    range: float  # 3D distance, meters
    elevation: float = 0.0  # degrees above the horizontal

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Observation:
    camera_axis: str  # "forward" | "downward"
    detected: tuple[Detection, ...] = ()

    def kinds(self) -> set[str]:
        return {d.kind for d in self.detected}

    def to_dict(self) -> dict[str, Any]:
        return {"camera_axis": self.camera_axis, "detected": [d.to_dict() for d in self.detected]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Observation:
        return cls(d["camera_axis"], tuple(Detection(**x) for x in d.get("detected", ())))


@dataclass(frozen=True)
class ActionOutcome:
    tag: str | None = None  # None means Succeeded

    @property
    def succeeded(self) -> bool:
        return self.tag is None

    def __str__(self) -> str:
        return "Succeeded" if self.tag is None else f"Failed({self.tag})"


SUCCEEDED = ActionOutcome()


@dataclass(frozen=True)
class FaultRule:
    """Force the `occurrence`-th execution (1-based) of `action` to fail with `tag`."""

    action: str
    occurrence: int
    tag: str

    def __post_init__(self) -> None:
        if self.tag not in FAILURE_TAGS:
            raise ValueError(f"unknown failure tag {self.tag!r}")


@dataclass(frozen=True)
class SimState:
    pose: Pose
    landed: bool
    clock: int
    detections: Observation | None
    fault_script: tuple[FaultRule, ...] = ()


@dataclass(frozen=True)
class Sample:
    clock: int
    pose: Pose


def _float(params: Mapping[str, Any], key: str, default: float | None = None) -> float:
    if key not in params:
        if default is None:
            raise ExecutorFault(f"missing parameter {key!r}")
        return default
    try:
        return float(params[key])
    except (TypeError, ValueError) as exc:
        raise ExecutorFault(f"parameter {key}={params[key]!r} is not a number") from exc


class Simulator:
    def __init__(
        self,
        world: WorldModel,
        fault_script: Sequence[FaultRule] = (),
        start: Pose = Pose(),
        rate_hz: int = RATE_HZ,
    ):
        self.world = world
        self.rate_hz = rate_hz
        self._state = SimState(start.rounded(), True, 0, None, tuple(fault_script))
        self.samples: list[Sample] = [Sample(0, self._state.pose)]
        self._counts: dict[str, int] = {}

    @property
    def state(self) -> SimState:
        return self._state

    # -- public API ---------------------------------------------------------------

    def step_action(self, name: str, params: Mapping[str, Any]) -> tuple[ActionOutcome, SimState]:
        if name not in ACTIONS:
            raise UnknownAction(name)
        self._counts[name] = self._counts.get(name, 0) + 1
        rule = next(
            (r for r in self._state.fault_script if r.action == name and r.occurrence == self._counts[name]), None
        )
        if rule is not None:
            if rule.tag == "executor_fault":
                raise ExecutorFault(f"scripted executor fault on {name} #{self._counts[name]}")
            if name in CAPTURE_ACTIONS:
                axis = "forward" if name == "ForwardDetect" else "downward"
                self._state = replace(self._state, detections=Observation(axis))
            self._advance_in_place(DETECT_TIME if name in CAPTURE_ACTIONS else 0.0)
            return ActionOutcome(rule.tag), self._state

        handler = getattr(self, f"_do_{name}")
        outcome = handler(params)
        return outcome, self._state

    def condition(self, name: str, params: Mapping[str, Any]) -> bool:
        if name not in CONDITIONS:
            raise UnknownAction(name)
        if name == "BatteryOk":
            return True
        if name == "ObjectDetected":
            obs = self._state.detections
            return obs is not None and str(params["kind"]) in obs.kinds()
        target = (_float(params, "x"), _float(params, "y"), _float(params, "z"))
        return geo.dist(self._state.pose.xyz, target) <= _float(params, "tol", 0.3)

    def idle(self, ticks: int = 1) -> SimState:
        """Advance the clock without moving (used to timestamp aborted actions)."""
        self._emit_hold(ticks)
        return self._state

    def observe(self, axis: str) -> Observation:
        """Everything the named camera sees from the current pose."""
        pose = self._state.pose
        found = []
        for obj in self.world.objects:
            if obj.kind == "NoFlyZone":
                continue
            det = self._sense(pose, obj, axis)
            if det is not None:
                found.append(det)
        found.sort(key=lambda d: (d.range, d.object_id))
        return Observation(axis, tuple(found))

    # -- actions --------------------------------------------------------------------

    def _do_Takeoff(self, p: Mapping[str, Any]) -> ActionOutcome:
        h = _float(p, "height")
        if h <= 0:
            return self._hold_fail("collision")
        pose = self._state.pose
        outcome = self._move(Pose(pose.x, pose.y, h, pose.yaw))
        if outcome.succeeded:
            self._state = replace(self._state, landed=False)
        return outcome

    def _do_Land(self, p: Mapping[str, Any]) -> ActionOutcome:
        pose = self._state.pose
        if self._state.landed:
            self._emit_hold(1)
            return SUCCEEDED
        outcome = self._move(Pose(pose.x, pose.y, 0.0, pose.yaw))
        if outcome.succeeded:
            self._state = replace(self._state, landed=True)
        return outcome

    def _do_FlyToCoordinates(self, p: Mapping[str, Any]) -> ActionOutcome:
        if self._state.landed:
            return self._hold_fail("collision")
        target = (_float(p, "x"), _float(p, "y"), _float(p, "z"))
        return self._move(Pose(*target, self._state.pose.yaw))

    def _body_move(self, forward: float, left: float) -> ActionOutcome:
        if self._state.landed:
            return self._hold_fail("collision")
        pose = self._state.pose
        dx, dy = geo.body_to_world(forward, left, pose.yaw)
        return self._move(Pose(pose.x + dx, pose.y + dy, pose.z, pose.yaw))

    def _do_MoveForward(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._body_move(_float(p, "distance"), 0.0)

    def _do_MoveBackward(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._body_move(-_float(p, "distance"), 0.0)

    def _do_MoveLeft(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._body_move(0.0, _float(p, "distance"))

    def _do_MoveRight(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._body_move(0.0, -_float(p, "distance"))

    def _turn(self, delta: float) -> ActionOutcome:
        if self._state.landed:
            return self._hold_fail("collision")
        start = self._state.pose
        ticks = self._ticks(abs(delta) / YAW_RATE)
        for k in range(1, ticks + 1):
            yaw = start.yaw + delta * k / ticks
            self._emit(replace(start, yaw=yaw).rounded())
        return SUCCEEDED

    def _do_TurnLeft(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._turn(_float(p, "angle"))

    def _do_TurnRight(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._turn(-_float(p, "angle"))

    def _do_Hover(self, p: Mapping[str, Any]) -> ActionOutcome:
        if self._state.landed:
            return self._hold_fail("collision")
        self._advance_in_place(max(0.0, _float(p, "duration")))
        return SUCCEEDED

    def _detect(self, p: Mapping[str, Any], axis: str) -> ActionOutcome:
        kind = str(p["kind"])
        self._advance_in_place(DETECT_TIME)
        obs = self.observe(axis)
        self._state = replace(self._state, detections=obs)
        return SUCCEEDED if kind in obs.kinds() else ActionOutcome("detect_miss")

    def _do_ForwardDetect(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._detect(p, "forward")

    def _do_DownwardDetect(self, p: Mapping[str, Any]) -> ActionOutcome:
        return self._detect(p, "downward")

    # -- sensing ------------------------------------------------------------------

    def _sense(self, pose: Pose, obj: WorldObject, axis: str) -> Detection | None:
        dx, dy, dz = (obj.position[i] - pose.xyz[i] for i in range(3))
        horiz = math.hypot(dx, dy)
        rng = math.sqrt(dx * dx + dy * dy + dz * dz)
        if axis == "downward":
            if obj.kind != "LandingMark" or horiz > DOWNWARD_RADIUS or obj.position[2] >= pose.z:
                return None
        else:
            if obj.kind == "LandingMark" or rng > FORWARD_RANGE or rng == 0:
                return None
            c, s = geo.cos_sin(pose.yaw)
            cos_angle = (dx * c + dy * s) / rng
            if cos_angle < math.cos(math.radians(FORWARD_HALF_ANGLE)) - 1e-12:
                return None
        bearing = 0.0 if horiz == 0 else geo.wrap180(math.degrees(math.atan2(dy, dx)) - pose.yaw)
        elevation = math.degrees(math.atan2(dz, horiz))
        return Detection(obj.id, obj.kind, bearing, rng, elevation)

    # -- motion core ---------------------------------------------------------------

    def _ticks(self, seconds: float) -> int:
        return max(1, math.ceil(seconds * self.rate_hz - 1e-9))

    def _emit(self, pose: Pose) -> None:
        clock = self._state.clock + 1
        self._state = replace(self._state, pose=pose, clock=clock)
        self.samples.append(Sample(clock, pose))

    def _emit_hold(self, ticks: int) -> None:
        for _ in range(ticks):
            self._emit(self._state.pose)

    def _advance_in_place(self, seconds: float) -> None:
        self._emit_hold(self._ticks(seconds))

    def _hold_fail(self, tag: str) -> ActionOutcome:
        self._emit_hold(1)
        return ActionOutcome(tag)

    def _move(self, target: Pose) -> ActionOutcome:
        start = self._state.pose
        a, b = start.xyz, target.rounded().xyz
        length = geo.dist(a, b)
        hit = first_violation(self.world, a, b)
        u, tag = (1.0, None) if hit is None else hit
        ticks = self._ticks(length / H_SPEED)
        used = ticks if hit is None else max(1, math.ceil(u * ticks - 1e-9))
        for k in range(1, used + 1):
            t = u * k / used
            self._emit(Pose(*geo.lerp(a, b, t), start.yaw).rounded())
        return ActionOutcome(tag)


def first_violation(world: WorldModel, a: Sequence[float], b: Sequence[float]) -> tuple[float, str] | None:
    """Earliest path parameter in (0, 1] at which segment a->b violates the world, with its tag."""
    length = geo.dist(a, b)
    if length == 0:
        return None
    grid = geo.segment_params(length)
    hits: list[tuple[float, str]] = []
    r = geo.DRONE_RADIUS

    for zone in world.of_kind("NoFlyZone"):
        chord = geo.square_chord(a, b, zone.position, zone.extent)
        if chord is None:
            continue
        t0, t1 = chord
        inside = [t for t in grid if t0 < t < t1]
        hits.append((inside[0] if inside else (t0 + t1) / 2, "zone_violation"))

    def solid(p: Sequence[float]) -> bool:
        (x0, x1), (y0, y1), (z0, z1) = world.bounds
        if not (x0 <= p[0] <= x1 and y0 <= p[1] <= y1 and z0 - 1e-9 <= p[2] <= z1):
            return True
        for o in world.objects:
            if o.kind == "Cylinder":
                if geo.dist2d(p, o.position) < o.extent + r and p[2] < o.height + r:
                    return True
            elif o.kind == "RectObstacle":
                if geo.in_open_square(p, o.position, o.extent + r) and p[2] < o.height + r:
                    return True
            elif o.kind == "Balloon":
                if geo.dist(p, o.position) < o.extent + r:
                    return True
        return False

    for t in grid:
        if solid(geo.lerp(a, b, t)):
            hits.append((t, "collision"))
            break

    for frame in world.of_kind("SquareFrame"):
        da = geo.frame_coords(a, frame.position, frame.yaw)[0]
        db = geo.frame_coords(b, frame.position, frame.yaw)[0]
        if da * db > 0 or da == db:
            continue
        if da == 0:
            continue  # leaving the plane; the crossing was judged on arrival
        t = da / (da - db)
        _, lat, vert = geo.frame_coords(geo.lerp(a, b, t), frame.position, frame.yaw)
        on_border = abs(lat) < frame.extent + r and abs(vert) < frame.extent + r
        clear = abs(lat) <= frame.opening - r and abs(vert) <= frame.opening - r
        if on_border and not clear:
            hits.append((max(t, 1e-9), "collision"))

    return min(hits) if hits else None


class SimExecutor:
    """BT leaf executor backed by a :class:`Simulator`.

    An action's first tick performs the simulator step and returns Running;
    the following tick reports its outcome. Every completed step is passed
    to `on_complete` (the state-capture hook) exactly once.
    """

    def __init__(
        self,
        sim: Simulator,
        on_complete: Callable[[Node, dict[str, Any], ActionOutcome, SimState], None] | None = None,
    ):
        self.sim = sim
        self.on_complete = on_complete
        self.pending: dict[str, ActionOutcome] = {}

    def tick_leaf(self, node: Node, params: dict[str, Any], blackboard: Blackboard) -> TickStatus:
        if node.kind == "Condition":
            return TickStatus.SUCCESS if self.sim.condition(node.name, params) else TickStatus.FAILURE
        if node.id in self.pending:
            outcome = self.pending.pop(node.id)
            return TickStatus.SUCCESS if outcome.succeeded else TickStatus.FAILURE
        try:
            outcome, state = self.sim.step_action(node.name, params)
        except ExecutorFault as exc:
            raise ExecutorFault(str(exc), node.id) from exc
        if outcome.succeeded and node.name in CAPTURE_ACTIONS:
            _write_target(blackboard, state, str(params["kind"]))
        if self.on_complete is not None:
            self.on_complete(node, params, outcome, state)
        self.pending[node.id] = outcome
        return TickStatus.RUNNING

    def halt(self, node: Node) -> None:
        self.pending.pop(node.id, None)

    def pending_node(self) -> str | None:
        return next(iter(self.pending), None)


def _write_target(bb: Blackboard, state: SimState, kind: str) -> None:
    """Position of the nearest detected object of `kind`, recovered from bearing/range/elevation."""
    obs = state.detections
    assert obs is not None
    det = next(d for d in obs.detected if d.kind == kind)
    x, y, z = locate(state.pose, det)
    bb["target_x"], bb["target_y"], bb["target_z"] = x, y, z


def locate(pose: Pose, det: Detection) -> tuple[float, float, float]:
    horiz = det.range * math.cos(math.radians(det.elevation))
    c, s = geo.cos_sin(pose.yaw + det.bearing)
    dz = det.range * math.sin(math.radians(det.elevation))
    return (
        round(pose.x + horiz * c, geo.ROUND) + 0.0,
        round(pose.y + horiz * s, geo.ROUND) + 0.0,
        round(pose.z + dz, geo.ROUND) + 0.0,
    )


def register_actions(
    sim: Simulator,
    on_complete: Callable[[Node, dict[str, Any], ActionOutcome, SimState], None] | None = None,
) -> SimExecutor:
    return SimExecutor(sim, on_complete)


@dataclass
class FaultScript:
    """Convenience loader for JSON/YAML fault scripts: a list of {action, occurrence, tag}."""

    rules: list[FaultRule] = field(default_factory=list)

    @classmethod
    def from_list(cls, items: Sequence[Mapping[str, Any]]) -> FaultScript:
        return cls([FaultRule(str(i["action"]), int(i.get("occurrence", 1)), str(i["tag"])) for i in items])
