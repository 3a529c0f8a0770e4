"""Hand-written reference plans for the benchmark tasks and the planner's one-shot sample."""

from __future__ import annotations

from .bt import BehaviorTree, parse_bt
from .errors import UnknownTask
from .scenes import FRAME_Z

ONE_SHOT_SAMPLE = """<BehaviorTree>
  <Sequence>
    <Takeoff height="1.5"/>
    <ForwardDetect kind="Balloon"/>
    <FlyToCoordinates x="{target_x}" y="{target_y}" z="1.5"/>
    <Land/>
  </Sequence>
</BehaviorTree>
"""

GRID_POINTS = ((0, 0), (2, 0), (2, 2), (0, 2), (-2, 2), (-2, 0), (-2, -2), (0, -2), (2, -2))


def fly(x: float, y: float, z: float) -> str:
    return f'<FlyToCoordinates x="{x:g}" y="{y:g}" z="{z:g}"/>'


def forward_search(kind: str) -> str:
    """Look ahead, then turn left in 90 degree steps until the object is in view."""
    turns = "".join(
        f'<Sequence><TurnLeft angle="90"/><ForwardDetect kind="{kind}"/></Sequence>' for _ in range(3)
    )
    return f'<Fallback><ForwardDetect kind="{kind}"/>{turns}</Fallback>'


def downward_search(kind: str, z: float) -> str:
    """Visit a 2 m lattice and look down at each point until the object is found."""
    legs = "".join(
        f'<Sequence>{fly(x, y, z)}<DownwardDetect kind="{kind}"/></Sequence>' for x, y in GRID_POINTS
    )
    return f"<Fallback>{legs}</Fallback>"


def _seq(*parts: str) -> str:
    return "<BehaviorTree><Sequence>" + "".join(parts) + "</Sequence></BehaviorTree>"


def reference_xml(task_id: int) -> str:
    z = 1.5
    if task_id == 1:
        return _seq(
            '<Takeoff height="1.5"/>',
            '<MoveForward distance="2"/>',
            '<TurnLeft angle="90"/>',
            '<MoveForward distance="2"/>',
            "<Land/>",
        )
    if task_id == 2:
        return _seq('<Takeoff height="1.5"/>', fly(2, 0, z), fly(2, 2, z), fly(0, 2, z), fly(0, 0, z), "<Land/>")
    if task_id == 3:
        return _seq('<Takeoff height="1.5"/>', fly(0, 1.5, z), fly(4, 1.5, z), fly(4, 1, z), "<Land/>")
    if task_id == 4:
        return _seq('<Takeoff height="1.5"/>', forward_search("Balloon"), '<ForwardDetect kind="Balloon"/>', "<Land/>")
    if task_id == 5:
        return _seq(
            f'<Takeoff height="{FRAME_Z:g}"/>',
            forward_search("SquareFrame"),
            '<ForwardDetect kind="SquareFrame"/>',
            "<Land/>",
        )
    if task_id == 6:
        return _seq(
            '<Takeoff height="1.5"/>',
            downward_search("LandingMark", z),
            '<FlyToCoordinates x="{target_x}" y="{target_y}" z="1.5"/>',
            '<DownwardDetect kind="LandingMark"/>',
            "<Land/>",
        )
    if task_id == 7:
        return _seq('<Takeoff height="1"/>', fly(2, 2, 1), "<Land/>")
    if task_id == 8:
        return _seq('<Takeoff height="1.5"/>', fly(0, 1, z), fly(2, 1, z), fly(2, 0, z), "<Land/>")
    if task_id == 9:
        return _seq(f'<Takeoff height="{FRAME_Z:g}"/>', fly(2, 0, FRAME_Z), "<Land/>")
    if task_id == 10:
        return _seq(
            f'<Takeoff height="{FRAME_Z:g}"/>',
            forward_search("SquareFrame"),
            '<ForwardDetect kind="SquareFrame"/>',
            '<FlyToCoordinates x="{target_x}" y="{target_y}" z="{target_z}"/>',
            '<MoveForward distance="1"/>',
            "<Land/>",
        )
    if task_id == 11:
        return _seq(
            '<Takeoff height="1.5"/>',
            fly(0, 1.5, z),
            fly(4, 1.5, z),
            '<DownwardDetect kind="LandingMark"/>',
            '<FlyToCoordinates x="{target_x}" y="{target_y}" z="1.5"/>',
            "<Land/>",
        )
    raise UnknownTask(str(task_id))


def reference_plan(task_id: int) -> BehaviorTree:
    return parse_bt(reference_xml(task_id))
