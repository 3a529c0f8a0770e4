"""The eleven benchmark scenes and their instructions."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from . import geometry as geo
from .errors import UnknownTask
from .sim import FORWARD_HALF_ANGLE, WorldModel, WorldObject

FRAME_Z = 1.2
FRAME_OUTER = 0.6
FRAME_OPENING = 0.4
CYLINDER_RADIUS = 0.3
CYLINDER_HEIGHT = 0.7
RECT_HALF = 0.3
RECT_HEIGHT = 3.0
ZONE_CELLS = ((1, 0), (1, 3), (2, 0), (2, 3))
MARK_T11 = (4.0, 1.0)

INSTRUCTIONS = {
    1: "Fly forward first, then fly left to the target point.",
    2: "Fly a 2x2 square path around the center point.",
    3: "Avoid No-Fly zones and proceed to the target point",
    4: "Find a balloon in the room",
    5: "Locate the square frame",
    6: "Search for a Landing mark on the floor",
    7: "Fly over the cylinder at 1m height",
    8: "Navigate around the rectangular obstacle",
    9: "Cross through the square frame",
    10: "Find and cross through the square frame",
    11: "Avoid No-Fly Zones and land on landing mark",
}

CATEGORIES = {
    "Path Planning": (1, 2, 3),
    "Object Searching": (4, 5, 6),
    "Obstacle Navigation": (7, 8, 9),
    "Composite Task": (10, 11),
}

RANDOMIZED = frozenset({5, 6, 10})
TASK_IDS = tuple(range(1, 12))


def category_of(task_id: int) -> str:
    for name, ids in CATEGORIES.items():
        if task_id in ids:
            return name
    raise UnknownTask(str(task_id))


@dataclass(frozen=True)
class Scene:
    task_id: int
    world: WorldModel
    instruction: str
    context: str  # scene configuration text shown to planners
    center: tuple[float, float] | None = None
    target: tuple[float, float] | None = None


def _zones() -> list[WorldObject]:
    return [WorldObject(f"zone_{x}_{y}", "NoFlyZone", (float(x), float(y), 0.0), 0.5) for x, y in ZONE_CELLS]


def _frame(oid: str, x: float, y: float, yaw: float, known: bool) -> WorldObject:
    return WorldObject(oid, "SquareFrame", (x, y, FRAME_Z), FRAME_OUTER, opening=FRAME_OPENING, yaw=yaw, known=known)


def _random_frame(rng: random.Random) -> tuple[float, float, float]:
    """A frame 1.5-3.5 m away, outside the forward camera cone of the start heading."""
    margin = 15.0
    dist = rng.uniform(1.5, 3.5)
    bearing = rng.uniform(FORWARD_HALF_ANGLE + margin, 360.0 - FORWARD_HALF_ANGLE - margin)
    c, s = geo.cos_sin(bearing)
    return round(dist * c, 3) + 0.0, round(dist * s, 3) + 0.0, round(bearing, 6)


def _random_mark(rng: random.Random) -> tuple[float, float]:
    """A landing mark in [-2.5, 2.5]^2 outside the downward view from the start point."""
    while True:
        x, y = round(rng.uniform(-2.5, 2.5), 3), round(rng.uniform(-2.5, 2.5), 3)
        if math.hypot(x, y) > 2.2:
            return x + 0.0, y + 0.0


def load_scene(task_id: int, seed: int = 0) -> Scene:
    """Scene for a benchmark task. `seed` only matters for the randomized tasks (5, 6, 10)."""
    if task_id not in INSTRUCTIONS:
        raise UnknownTask(f"unknown task {task_id!r}; valid ids are 1..11")
    rng = random.Random(seed * 100 + task_id)
    text = INSTRUCTIONS[task_id]
    if task_id == 1:
        return Scene(1, WorldModel(), text, "Target point at (2, 2).", target=(2.0, 2.0))
    if task_id == 2:
        return Scene(2, WorldModel(), text, "Center point at (1, 1).", center=(1.0, 1.0))
    if task_id == 3:
        ctx = "Target (4, 1). No-fly zones are unit cells centered at (1,0), (1,3), (2,0), (2,3)."
        return Scene(3, WorldModel(tuple(_zones())), text, ctx, target=(4.0, 1.0))
    if task_id == 4:
        balloon = WorldObject("balloon", "Balloon", (-2.0, 3.0, 1.0), 0.2, known=False)
        return Scene(4, WorldModel((balloon,)), text, "A balloon is somewhere in the room.")
    if task_id in (5, 10):
        x, y, yaw = _random_frame(rng)
        ctx = "A square frame is somewhere in the room at an unknown position."
        return Scene(task_id, WorldModel((_frame("frame", x, y, yaw, known=False),)), text, ctx)
    if task_id == 6:
        x, y = _random_mark(rng)
        mark = WorldObject("mark", "LandingMark", (x, y, 0.0), 0.25, known=False)
        return Scene(6, WorldModel((mark,)), text, "A landing mark is on the floor within 2.5 m of the start.")
    if task_id == 7:
        cyl = WorldObject("cylinder", "Cylinder", (1.0, 1.0, 0.0), CYLINDER_RADIUS, height=CYLINDER_HEIGHT)
        return Scene(7, WorldModel((cyl,)), text, f"Cylinder at (1, 1), {CYLINDER_HEIGHT} m tall.", target=(1.0, 1.0))
    if task_id == 8:
        box = WorldObject("obstacle", "RectObstacle", (1.0, 0.0, 0.0), RECT_HALF, height=RECT_HEIGHT)
        return Scene(8, WorldModel((box,)), text, "Obstacle at (1, 0); goal is (2, 0).", target=(2.0, 0.0))
    if task_id == 9:
        return Scene(9, WorldModel((_frame("frame", 1.0, 0.0, 0.0, known=True),)), text, "Square frame at (1, 0) facing +x.")
    mark = WorldObject("mark", "LandingMark", (*MARK_T11, 0.0), 0.25, known=False)
    ctx = "No-fly zones are unit cells centered at (1,0), (1,3), (2,0), (2,3). A landing mark lies beyond them near x = 4."
    return Scene(11, WorldModel((*_zones(), mark)), text, ctx, target=MARK_T11)
