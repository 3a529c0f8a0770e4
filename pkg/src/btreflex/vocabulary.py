"""Action, condition and control-flow vocabulary.

The simulator registers exactly these leaves, the parser accepts exactly these
tags, and the refiner may only emit repairs drawn from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

COMPOSITES = ("Sequence", "Fallback", "Parallel")
DECORATORS = ("Inverter", "Repeat", "RetryUntilSuccessful")

# decorator -> (param name, required)
DECORATOR_PARAMS: dict[str, tuple[str, ...]] = {
    "Inverter": (),
    "Repeat": ("num_cycles",),
    "RetryUntilSuccessful": ("num_attempts",),
}

DETECTABLE_KINDS = ("Balloon", "SquareFrame", "LandingMark", "Cylinder", "RectObstacle")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str  # "float" | "kind"
    required: bool = True
    default: str | None = None


@dataclass(frozen=True)
class LeafSpec:
    name: str
    leaf: str  # "Action" | "Condition"
    params: tuple[ParamSpec, ...]
    doc: str
    capture: bool = False  # information-capture action (records an observation)

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None


def _f(name: str, required: bool = True, default: str | None = None) -> ParamSpec:
    return ParamSpec(name, "float", required, default)


_KIND = ParamSpec("kind", "kind")

ACTIONS: dict[str, LeafSpec] = {
    s.name: s
    for s in (
        LeafSpec("Takeoff", "Action", (_f("height"),), "Take off vertically to `height` meters."),
        LeafSpec("Land", "Action", (), "Descend vertically and land at the current position."),
        LeafSpec(
            "FlyToCoordinates",
            "Action",
            (_f("x"), _f("y"), _f("z")),
            "Fly in a straight line to NWU coordinate (x, y, z); heading is unchanged.",
        ),
        LeafSpec("MoveForward", "Action", (_f("distance"),), "Move `distance` meters along the current heading."),
        LeafSpec("MoveBackward", "Action", (_f("distance"),), "Move `distance` meters opposite to the heading."),
        LeafSpec("MoveLeft", "Action", (_f("distance"),), "Strafe `distance` meters to the left of the heading."),
        LeafSpec("MoveRight", "Action", (_f("distance"),), "Strafe `distance` meters to the right of the heading."),
        LeafSpec("TurnLeft", "Action", (_f("angle"),), "Rotate counterclockwise (seen from above) by `angle` degrees."),
        LeafSpec("TurnRight", "Action", (_f("angle"),), "Rotate clockwise (seen from above) by `angle` degrees."),
        LeafSpec(
            "ForwardDetect",
            "Action",
            (_KIND,),
            "Look for an object of `kind` with the forward camera; fails if none is in view. "
            "On success writes {target_x}, {target_y}, {target_z} to the blackboard.",
            capture=True,
        ),
        LeafSpec(
            "DownwardDetect",
            "Action",
            (_KIND,),
            "Look for an object of `kind` below the drone; fails if none is in view. "
            "On success writes {target_x}, {target_y}, {target_z} to the blackboard.",
            capture=True,
        ),
        LeafSpec("Hover", "Action", (_f("duration"),), "Hold position for `duration` seconds."),
    )
}

CONDITIONS: dict[str, LeafSpec] = {
    s.name: s
    for s in (
        LeafSpec("ObjectDetected", "Condition", (_KIND,), "True if the last detection contains an object of `kind`."),
        LeafSpec(
            "AtCoordinates",
            "Condition",
            (_f("x"), _f("y"), _f("z"), _f("tol", required=False, default="0.3")),
            "True if the drone is within `tol` meters of (x, y, z).",
        ),
        LeafSpec("BatteryOk", "Condition", (), "True while the battery is sufficient."),
    )
}

CAPTURE_ACTIONS = frozenset(name for name, s in ACTIONS.items() if s.capture)

LOGIC_DOCS = {
    "Sequence": "Tick children in order; fail at the first failing child, succeed when all succeed.",
    "Fallback": "Tick children in order; succeed at the first succeeding child, fail when all fail.",
    "Parallel": "Tick all children; succeed once `success_threshold` children succeed.",
    "Inverter": "Swap Success and Failure of its single child.",
    "Repeat": "Run its child `num_cycles` times (-1 repeats forever); fails if the child fails.",
    "RetryUntilSuccessful": "Re-run its child up to `num_attempts` times until it succeeds.",
}


@dataclass(frozen=True)
class StrategySpace:
    """Closed sets of leaves (action space) and control-flow kinds (logic space)."""

    action_space: Mapping[str, LeafSpec] = field(default_factory=lambda: {**ACTIONS, **CONDITIONS})
    logic_space: frozenset[str] = frozenset(COMPOSITES + DECORATORS)

    def leaf(self, name: str) -> LeafSpec | None:
        return self.action_space.get(name)

    def allows(self, name: str) -> bool:
        return name in self.action_space or name in self.logic_space

    def node_docs(self) -> str:
        lines = ["Control nodes:"]
        for name in COMPOSITES + DECORATORS:
            if name in self.logic_space:
                lines.append(f"- {name}: {LOGIC_DOCS[name]}")
        lines.append("Action nodes:")
        for spec in self.action_space.values():
            if spec.leaf == "Action":
                lines.append(f"- {_signature(spec)}: {spec.doc}")
        lines.append("Condition nodes:")
        for spec in self.action_space.values():
            if spec.leaf == "Condition":
                lines.append(f"- {_signature(spec)}: {spec.doc}")
        return "\n".join(lines)


def _signature(spec: LeafSpec) -> str:
    if not spec.params:
        return spec.name
    return f"{spec.name}({', '.join(p.name for p in spec.params)})"


DEFAULT_SPACE = StrategySpace()
