"""Test doubles and reference implementations shared by several test modules."""

from __future__ import annotations

import itertools
import math
import re
from typing import Iterator

from pytest import approx

from btreflex.bt import BehaviorTree, Blackboard, Node, TickStatus

S, F, R = TickStatus.SUCCESS, TickStatus.FAILURE, TickStatus.RUNNING
STATUSES = (S, F, R)


class ScriptedExecutor:
    """Leaf executor driven by per-node status scripts; records every call."""

    def __init__(self, scripts: dict[str, list[TickStatus]] | None = None, default: TickStatus = S):
        self.scripts = {k: list(v) for k, v in (scripts or {}).items()}
        self.default = default
        self.calls: list[str] = []
        self.halted: list[str] = []

    def tick_leaf(self, node: Node, params: dict, blackboard: Blackboard) -> TickStatus:
        self.calls.append(node.id)
        script = self.scripts.get(node.id)
        if not script:
            return self.default
        return script.pop(0) if len(script) > 1 else script[0]

    def halt(self, node: Node) -> None:
        self.halted.append(node.id)


# -- tree construction from nested tuples ------------------------------------------------
# leaf spec: a TickStatus;  composite spec: ("Sequence"|"Fallback", [children]) or
# ("Parallel", k, [children])


def build(spec) -> tuple[BehaviorTree, dict[str, TickStatus]]:
    nodes: dict[str, Node] = {}
    statuses: dict[str, TickStatus] = {}
    counter = itertools.count()

    def rec(s) -> str:
        nid = f"n{next(counter)}"
        if isinstance(s, TickStatus):
            nodes[nid] = Node(nid, "Action", "Hover", {"duration": "1"})
            statuses[nid] = s
            return nid
        if s[0] == "Parallel":
            _, k, kids = s
            ids = tuple(rec(c) for c in kids)
            nodes[nid] = Node(nid, "Parallel", "Parallel", {"success_threshold": str(k)}, ids)
        else:
            kind, kids = s
            ids = tuple(rec(c) for c in kids)
            nodes[nid] = Node(nid, kind, kind, {}, ids)
        return nid

    root = rec(spec)
    return BehaviorTree(root, nodes), statuses


def reference_status(spec) -> TickStatus:
    """Truth-table evaluation of a single tick from a fresh state."""
    if isinstance(spec, TickStatus):
        return spec
    if spec[0] == "Parallel":
        _, k, kids = spec
        results = [reference_status(c) for c in kids]
        n = len(results)
        if results.count(S) >= k:
            return S
        if results.count(F) > n - k:
            return F
        return R
    kind, kids = spec
    stop = F if kind == "Sequence" else S
    for c in kids:
        status = reference_status(c)
        if status is not (S if kind == "Sequence" else F):
            return status
    return S if stop is F else F


def enumerate_specs(depth: int, max_leaves: int) -> Iterator[tuple[object, int]]:
    """Every status-assigned tree with depth <= depth, <= 3 children per node and
    <= max_leaves leaves, yielded with its leaf count."""
    for status in STATUSES:
        yield status, 1
    if depth == 1:
        return
    subs = list(enumerate_specs(depth - 1, max_leaves))
    for n in (1, 2, 3):
        for combo in itertools.product(subs, repeat=n):
            leaves = sum(c[1] for c in combo)
            if leaves > max_leaves:
                continue
            kids = [c[0] for c in combo]
            yield ("Sequence", kids), leaves
            yield ("Fallback", kids), leaves
            for k in range(1, n + 1):
                yield ("Parallel", k, kids), leaves


# -- random missions ----------------------------------------------------------------

_RANDOM_LEAVES = (
    ("MoveForward", "distance"),
    ("MoveLeft", "distance"),
    ("MoveRight", "distance"),
    ("MoveBackward", "distance"),
    ("TurnLeft", "angle"),
    ("TurnRight", "angle"),
    ("Hover", "duration"),
    ("ForwardDetect", "kind"),
    ("DownwardDetect", "kind"),
    ("FlyToCoordinates", None),
)


def random_leaf(rng) -> str:
    name, key = rng.choice(_RANDOM_LEAVES)
    if name == "FlyToCoordinates":
        return f'<FlyToCoordinates x="{rng.randint(-3, 4)}" y="{rng.randint(-3, 3)}" z="{rng.choice([1, 1.2, 1.5])}"/>'
    if key == "kind":
        return f'<{name} kind="{rng.choice(["Balloon", "SquareFrame", "LandingMark", "Cylinder"])}"/>'
    if key == "angle":
        return f'<{name} angle="{rng.choice([30, 45, 90, 135])}"/>'
    if key == "duration":
        return f'<{name} duration="{rng.choice([0, 0.5, 1])}"/>'
    return f'<{name} distance="{rng.choice([0.5, 1, 1.5])}"/>'


def random_plan_xml(rng, n_leaves: int = 8) -> str:
    """A random but well-formed plan: usually takes off, mixes Sequence/Fallback groups."""
    body = []
    if rng.random() < 0.9:
        body.append(f'<Takeoff height="{rng.choice([1, 1.2, 1.5])}"/>')
    while len(body) < n_leaves:
        if rng.random() < 0.25:
            kind = rng.choice(["Sequence", "Fallback"])
            kids = "".join(random_leaf(rng) for _ in range(rng.randint(1, 3)))
            body.append(f"<{kind}>{kids}</{kind}>")
        else:
            body.append(random_leaf(rng))
    if rng.random() < 0.7:
        body.append("<Land/>")
    root = rng.choice(["Sequence", "Sequence", "Fallback"])
    return f"<BehaviorTree><{root}>{''.join(body)}</{root}></BehaviorTree>"


def random_faults(rng):
    from btreflex.sim import FaultRule

    rules = []
    for _ in range(rng.randint(0, 2)):
        action = rng.choice(["ForwardDetect", "DownwardDetect", "MoveForward", "Hover", "FlyToCoordinates"])
        tag = rng.choice(["detect_miss", "collision", "executor_fault", "zone_violation"])
        rules.append(FaultRule(action, rng.randint(1, 2), tag))
    return rules


# -- fidelity oracle: re-derive every rendered number from raw poses ---------------

NUM = r"-?\d+(?:\.\d+)?"
NWU = re.compile(rf"NWU\(({NUM}), ({NUM}), ({NUM})\)")
REL = re.compile(rf"'([^']+)' at NWU\(({NUM}), ({NUM}), ({NUM})\), (at|within|near|far) \(({NUM}) m\)")
MOVE = re.compile(rf"move (forward|backward|left|right|up|down) ({NUM})m to")
MULTI = re.compile(rf"move ({NUM})m \(([^)]*)\) to")
TURN = re.compile(rf"turn (left|right) with ({NUM})° to heading ({NUM})°")


def _zone_dist(p, c, half=0.5):
    return math.hypot(max(abs(p[0] - c[0]) - half, 0), max(abs(p[1] - c[1]) - half, 0))


def check_fidelity(seq, traj, world):
    kinds = {o.id: o.kind for o in world.objects} if world else {}
    for (i, j), seg in zip([s.interval for s in traj.segments], traj.segments):
        prev, curr = seq[i - 1].pose, seq[j - 1].pose
        sentence = seg.sentence
        head = sentence.split(" while ")[0].split("; ")[0]
        (x, y, z) = map(float, NWU.findall(head)[-1])
        assert (x, y, z) == approx(curr.xyz, abs=1e-6)
        for word, mag in MOVE.findall(head):
            assert float(mag) == approx(math.dist(prev.xyz, curr.xyz), abs=1e-6)
        for total, comps in MULTI.findall(head):
            assert float(total) == approx(math.dist(prev.xyz, curr.xyz), abs=1e-6)
            mags = [float(c.split()[1]) for c in comps.split(", ")]
            assert math.hypot(*mags) == approx(float(total), abs=1e-5)
        for side, deg, heading in TURN.findall(head):
            dyaw = (curr.yaw - prev.yaw + 180) % 360 - 180
            assert float(deg) == approx(abs(dyaw), abs=1e-6)
            assert float(heading) == approx(curr.yaw, abs=1e-6)
            assert (side == "left") == (dyaw > 0)
        for oid, ox, oy, oz, _, d in REL.findall(sentence):
            o = (float(ox), float(oy), float(oz))
            if kinds.get(oid) == "NoFlyZone":
                want = _zone_dist(curr.xyz, o)
            else:
                want = math.dist(curr.xyz, o)
            assert float(d) == approx(want, abs=1e-6)
            if oid in kinds:
                assert o == approx(world.get(oid).position, abs=1e-6)
