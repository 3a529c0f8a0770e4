"""Execute one behavior-tree plan against the simulator and capture Π."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .bt import BehaviorTree, Blackboard, TickStatus, Ticker
from .capture import ActionRecord, AnnotatedStateSequence, MissionRecorder
from .errors import BlackboardKeyError, ExecutorFault
from .sim import ActionOutcome, FaultRule, Sample, Simulator, WorldModel, register_actions

DEFAULT_MAX_TICKS = 1000


@dataclass
class MissionResult:
    status: str  # "Success" | "Failure" | "TimeoutFailure" | "Aborted"
    ticks: int
    sequence: AnnotatedStateSequence
    samples: list[Sample]
    blackboard: Blackboard
    abort_reason: str | None = None


def execute_mission(
    tree: BehaviorTree,
    world: WorldModel,
    fault_script: Sequence[FaultRule] = (),
    max_ticks: int = DEFAULT_MAX_TICKS,
) -> MissionResult:
    """Tick `tree` until it finishes, the budget runs out, or the executor faults.

    Faults and budget exhaustion end the mission with an extra captured step
    tagged ``executor_fault`` / ``timeout`` for the node that was active.
    """
    if max_ticks < 1:
        raise ValueError(f"max_ticks must be >= 1, got {max_ticks}")
    sim = Simulator(world, fault_script)
    recorder = MissionRecorder()
    executor = register_actions(sim, recorder)
    bb = Blackboard()
    ticker = Ticker(tree, bb, executor)
    status, reason = "TimeoutFailure", None
    ticks = 0
    for ticks in range(1, max_ticks + 1):
        try:
            result = ticker.tick()
        except (ExecutorFault, BlackboardKeyError) as exc:
            node_id = exc.node_id or tree.root
            _abort(recorder, sim, tree, node_id, "executor_fault")
            status, reason = "Aborted", str(exc)
            break
        if result is not TickStatus.RUNNING:
            status = result.value
            break
    else:
        active = executor.pending_node() or tree.root
        _abort(recorder, sim, tree, active, "timeout")
        ticker.halt()
        reason = f"tick budget of {max_ticks} exhausted"
    seq = AnnotatedStateSequence(tuple(recorder.steps))
    return MissionResult(status, ticks, seq, list(sim.samples), bb, reason)


def _abort(recorder: MissionRecorder, sim: Simulator, tree: BehaviorTree, node_id: str, tag: str) -> None:
    node = tree[node_id]
    state = sim.idle(1)
    params = {k: str(v) for k, v in node.params.items()}
    recorder.capture(state, ActionRecord(node.name, params, node_id, ActionOutcome(tag)))
