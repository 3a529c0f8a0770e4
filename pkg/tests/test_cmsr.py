from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btreflex.bt import parse_bt
from btreflex.capture import ActionRecord, AnnotatedStateSequence, AnnotatedStep, CapturedData, StateVector
from btreflex.cmsr import (
    EnvironmentState,
    MotionSemantics,
    TrackedObject,
    cmsr,
    derive_motion,
    infer_spatial_relation,
    update_environment_state,
)
from btreflex.errors import SequenceTooShort
from btreflex.mission import execute_mission
from btreflex.plans import reference_plan
from btreflex.scenes import load_scene
from btreflex.sim import ActionOutcome, Detection, Observation, Pose
from helpers import check_fidelity, random_plan_xml


def step(name, pose, ts, obs=None, tag=None, params=None):
    record = ActionRecord(name, params or {}, f"n{ts}", ActionOutcome(tag))
    return AnnotatedStep(record, CapturedData(StateVector(Pose(*pose), ts), obs, tag))


class TestDeriveMotion:
    def test_fly_to(self):
        m = derive_motion(step("Takeoff", (0, 0, 1.5, 0), 1), step("FlyToCoordinates", (1, 2, 1.5, 0), 2))
        assert m.displacement == "fly to coordinate NWU(1, 2, 1.5)"
        assert m.deltas == (1, 2, 0)

    def test_turn_left(self):
        m = derive_motion(step("Takeoff", (0, 0, 1.5, 0), 1), step("TurnLeft", (0, 0, 1.5, 90), 2))
        assert m.orientation_change == "+90°"
        assert m.yaw_delta == 90

    def test_turn_across_zero(self):
        m = derive_motion(step("Takeoff", (0, 0, 1.5, 350), 1), step("TurnLeft", (0, 0, 1.5, 20), 2))
        assert m.yaw_delta == pytest.approx(30)

    def test_held_position(self):
        m = derive_motion(step("Hover", (1, 1, 1, 0), 1), step("Hover", (1, 1, 1, 0), 2))
        assert m.displacement.startswith("held position")
        assert m.deltas == (0, 0, 0)

    def test_body_relative_wording(self):
        m = derive_motion(step("Takeoff", (1, 2, 1.5, 90), 1), step("MoveForward", (1, 3, 1.5, 90), 2))
        assert m.displacement == "move forward 1m to NWU(1, 3, 1.5)"
        m = derive_motion(step("Takeoff", (0, 0, 1.5, 90), 1), step("MoveRight", (1, 0, 1.5, 90), 2))
        assert m.displacement.startswith("move right 1m")


class TestEnvironment:
    def test_first_detection_then_occluded(self):
        det = Detection("balloon", "Balloon", 0.0, 2.0, 0.0)
        s1 = step("ForwardDetect", (0, 0, 1, 0), 1, Observation("forward", (det,)))
        env = update_environment_state(EnvironmentState(), s1)
        assert env.tracked["balloon"].visibility == "visible"
        assert env.tracked["balloon"].last_pose == pytest.approx((2, 0, 1))
        env = update_environment_state(env, step("MoveLeft", (0, 1, 1, 0), 2))
        assert env.tracked["balloon"].visibility == "occluded"
        assert "balloon" in env.tracked

    def test_triangulation_error_task4(self):
        result = execute_mission(reference_plan(4), load_scene(4).world)
        env = EnvironmentState()
        for s in result.sequence:
            env = update_environment_state(env, s)
        tracked = env.tracked["balloon"].last_pose
        assert math.dist(tracked, (-2, 3, 1)) < 0.1


class TestRelation:
    def test_paper_traversal_example(self):
        frame = TrackedObject("SquareFrame", (-0.86, 1.29, 1.18), 1, "visible", 0.6, 0, 0.4, yaw=124.0)
        motion = MotionSemantics("MoveForward", "", (-0.5, 0.7, 0.0), "0°", 0.0)
        r = infer_spatial_relation(motion, Pose(-0.93, 1.31, 1.26, 124), frame)
        assert r.safety == "traversing_frame"

    def test_departing_far(self):
        obj = TrackedObject("Balloon", (-10, 0, 1), 1, "visible", 0.2)
        motion = MotionSemantics("MoveForward", "", (1.0, 0.0, 0.0), "0°", 0.0)
        r = infer_spatial_relation(motion, Pose(0, 0, 1, 0), obj, Pose(-1, 0, 1, 0))
        assert r.intent == "departing"
        assert r.render().startswith("far (10.0 m)")

    def test_coincident(self):
        obj = TrackedObject("LandingMark", (1, 1, 0), 1, "visible", 0.25)
        motion = MotionSemantics("Land", "", (0.0, 0.0, -1.0), "0°", 0.0)
        r = infer_spatial_relation(motion, Pose(1, 1, 0, 0), obj)
        assert r.distance == 0
        assert r.proximity == "at"

    def test_zone_entry_is_inside_zone(self):
        zone = TrackedObject("NoFlyZone", (1, 0, 0), None, "unseen", 0.5)
        motion = MotionSemantics("FlyToCoordinates", "", (2.0, 0.0, 0.0), "0°", 0.0)
        r = infer_spatial_relation(motion, Pose(2, 0, 1.5, 0), zone, Pose(0, 0, 1.5, 0))
        assert r.safety == "inside_zone"


class TestCmsr:
    def test_task2_lines(self):
        result = execute_mission(reference_plan(2), load_scene(2).world)
        traj = cmsr(result.sequence, load_scene(2).world)
        assert traj.lines[3].startswith("During [t_4, t_5]: FlyToCoordinates")
        assert len(traj.segments) == len(result.sequence) - 1

    def test_hover_mission(self):
        seq = AnnotatedStateSequence(tuple(step("Hover", (0, 0, 1, 0), t) for t in (1, 2, 3)))
        traj = cmsr(seq)
        assert all("held position" in line for line in traj.lines)
        assert all(rels == () for _, rels in traj.relations)

    def test_single_pair(self):
        seq = AnnotatedStateSequence((step("Takeoff", (0, 0, 1, 0), 1), step("Land", (0, 0, 0, 0), 2)))
        assert len(cmsr(seq).segments) == 1

    def test_too_short(self):
        with pytest.raises(SequenceTooShort):
            cmsr(AnnotatedStateSequence((step("Takeoff", (0, 0, 1, 0), 1),)))

    def test_failure_visible_in_narrative(self):
        tree = parse_bt("<Sequence><Takeoff height='1.5'/><FlyToCoordinates x='4' y='1' z='1.5'/></Sequence>")
        world = load_scene(3).world
        text = cmsr(execute_mission(tree, world).sequence, world).text
        assert "[failed: zone_violation]" in text
        assert "inside no-fly zone" in text

    def test_json_sidecar(self):
        result = execute_mission(reference_plan(9), load_scene(9).world)
        traj = cmsr(result.sequence, load_scene(9).world)
        assert '"traversing_frame"' in traj.to_json()


@pytest.mark.parametrize("task", range(1, 12))
def test_reference_fidelity_and_determinism(task):
    scene = load_scene(task)
    seq = execute_mission(reference_plan(task), scene.world).sequence
    first = cmsr(seq, scene.world)
    check_fidelity(seq, first, scene.world)
    for _ in range(20):
        assert cmsr(seq, scene.world).text == first.text


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_random_mission_segments_and_fidelity(seed):
    rng = random.Random(seed)
    scene = load_scene(rng.randint(1, 11), seed)
    tree = parse_bt(random_plan_xml(rng, rng.randint(2, 8)))
    seq = execute_mission(tree, scene.world).sequence
    if len(seq) < 2:
        return
    traj = cmsr(seq, scene.world)
    assert len(traj.segments) == len(seq) - 1
    assert [s.interval for s in traj.segments] == [(i, i + 1) for i in range(1, len(seq))]
    check_fidelity(seq, traj, scene.world)


def test_persistence_never_drops_objects():
    rng = random.Random(7)
    for i in range(30):
        scene = load_scene(rng.choice([4, 5, 6, 10, 11]), i)
        seq = execute_mission(parse_bt(random_plan_xml(rng, 8)), scene.world).sequence
        env = EnvironmentState()
        seen: set[str] = set()
        for s in seq:
            env = update_environment_state(env, s)
            assert seen <= set(env.tracked)
            seen = set(env.tracked)
