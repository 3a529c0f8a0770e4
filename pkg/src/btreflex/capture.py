"""Action-centric state filtering.

State is recorded only when an action node completes. Motion actions record
the pose; information-capture actions record the pose plus what the camera
saw; failed actions carry their failure tag.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Sequence

from .bt import BlackboardRef, Node
from .errors import DoubleCaptureError, EmptyMissionError
from .sim import ActionOutcome, Observation, Pose, Sample, SimState
from .vocabulary import CAPTURE_ACTIONS


@dataclass(frozen=True)
class StateVector:
    pose: Pose
    timestamp: int  # simulator clock tick


@dataclass(frozen=True)
class CapturedData:
    state: StateVector
    observation: Observation | None = None
    failure_tag: str | None = None


@dataclass(frozen=True)
class ActionRecord:
    name: str
    params: Mapping[str, Any]
    node_id: str
    outcome: ActionOutcome


@dataclass(frozen=True)
class AnnotatedStep:
    action: ActionRecord
    data: CapturedData

    @property
    def pose(self) -> Pose:
        return self.data.state.pose

    @property
    def failure_tag(self) -> str | None:
        return self.data.failure_tag

    def to_dict(self, idx: int) -> dict[str, Any]:
        obs = self.data.observation
        return {
            "idx": idx,
            "action": self.action.name,
            "params": {k: _jsonable(v) for k, v in self.action.params.items()},
            "node_id": self.action.node_id,
            "outcome": str(self.action.outcome),
            "failure_tag": self.data.failure_tag,
            "timestamp": self.data.state.timestamp,
            "pose": self.pose.to_dict(),
            "observation": None if obs is None else obs.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AnnotatedStep:
        tag = d.get("failure_tag")
        obs = d.get("observation")
        record = ActionRecord(d["action"], dict(d.get("params", {})), d["node_id"], ActionOutcome(tag))
        data = CapturedData(
            StateVector(Pose.from_dict(d["pose"]), int(d["timestamp"])),
            None if obs is None else Observation.from_dict(obs),
            tag,
        )
        return cls(record, data)


def _jsonable(v: Any) -> Any:
    if isinstance(v, BlackboardRef):
        return str(v)
    return v


@dataclass(frozen=True)
class AnnotatedStateSequence:
    """Π: one step per completed action node, in completion order."""

    items: tuple[AnnotatedStep, ...]

    def __post_init__(self) -> None:
        stamps = [s.data.state.timestamp for s in self.items]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("timestamps must strictly increase along the sequence")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[AnnotatedStep]:
        return iter(self.items)

    def __getitem__(self, i: int) -> AnnotatedStep:
        return self.items[i]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(i), sort_keys=True) + "\n" for i, s in enumerate(self.items))

    @classmethod
    def from_jsonl(cls, text: str) -> AnnotatedStateSequence:
        steps = [AnnotatedStep.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(tuple(steps))


def capture_on_completion(sim_state: SimState, action_record: ActionRecord) -> CapturedData:
    """Record the state at an action boundary (pure; see :class:`MissionRecorder` for the guard)."""
    observation = None
    if action_record.name in CAPTURE_ACTIONS:
        axis = "forward" if action_record.name == "ForwardDetect" else "downward"
        obs = sim_state.detections
        # a failed capture keeps no sensor payload, only the fact that it looked
        observation = obs if obs is not None and action_record.outcome.succeeded else Observation(axis)
    return CapturedData(StateVector(sim_state.pose, sim_state.clock), observation, action_record.outcome.tag)


class MissionRecorder:
    """Collects one captured step per completed action; plugs into the simulator executor."""

    def __init__(self) -> None:
        self.steps: list[AnnotatedStep] = []
        self._last_clock = -1

    def capture(self, sim_state: SimState, record: ActionRecord) -> CapturedData:
        if sim_state.clock <= self._last_clock:
            raise DoubleCaptureError(f"action boundary at tick {sim_state.clock} was already captured")
        data = capture_on_completion(sim_state, record)
        self._last_clock = sim_state.clock
        self.steps.append(AnnotatedStep(record, data))
        return data

    def __call__(self, node: Node, params: dict[str, Any], outcome: ActionOutcome, state: SimState) -> None:
        self.capture(state, ActionRecord(node.name, dict(params), node.id, outcome))


def build_sequence(mission_log: Sequence[AnnotatedStep] | MissionRecorder) -> AnnotatedStateSequence:
    steps = mission_log.steps if isinstance(mission_log, MissionRecorder) else list(mission_log)
    if not steps:
        raise EmptyMissionError("mission completed no action")
    return AnnotatedStateSequence(tuple(steps))


def fixed_rate_records(samples: Sequence[Sample], hz: float, rate_hz: int = 100) -> int:
    """How many records a fixed-interval logger at `hz` would keep over the same mission."""
    if not samples:
        return 0
    duration = (samples[-1].clock - samples[0].clock) / rate_hz
    return math.floor(duration * hz + 1e-9) + 1


def reduction_ratio(sequence: AnnotatedStateSequence, samples: Sequence[Sample], hz: float = 20.0) -> float:
    fixed = fixed_rate_records(samples, hz)
    return 1.0 - len(sequence) / fixed
