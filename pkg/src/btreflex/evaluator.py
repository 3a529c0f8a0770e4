"""Task outcome determination with failure explanation and localization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from .capture import AnnotatedStateSequence
from .cmsr import SemanticTrajectory
from .errors import LengthMismatch, MalformedVerdict, MetricsUndefined, NoGoalSpec
from .goals import (
    CAUSE_PHRASES,
    FinalState,
    TaskGoalSpec,
    Violation,
    classify_explanation,
    first_violation,
    frames_from_sequence,
)
from .llm import OUTCOME_EVALUATION, Gateway

OUTCOMES = ("Success", "PlanFailure", "ExecutionFailure")
EXECUTION_TAGS = frozenset({"executor_fault", "timeout"})


@dataclass(frozen=True)
class EvaluationVerdict:
    outcome: str
    explanation: str = ""
    fault_action_index: int | None = None
    fault_node_id: str | None = None
    confidence: float = 1.0
    cause: str | None = None

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.outcome == "Success":
            if self.fault_action_index is not None or self.fault_node_id is not None:
                raise ValueError("a Success verdict carries no fault fields")
        elif not self.explanation or self.fault_action_index is None:
            raise ValueError("a failure verdict needs an explanation and a fault index")

    @property
    def failed(self) -> bool:
        return self.outcome != "Success"

    def to_dict(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome,
            "explanation": self.explanation,
            "fault_action_index": self.fault_action_index,
            "fault_node_id": self.fault_node_id,
            "confidence": self.confidence,
            "cause": self.cause,
        }


SUCCESS = EvaluationVerdict("Success")


def _verdict(seq: AnnotatedStateSequence, v: Violation) -> EvaluationVerdict:
    tag = seq[v.index].failure_tag
    outcome = "ExecutionFailure" if tag in EXECUTION_TAGS else "PlanFailure"
    return EvaluationVerdict(outcome, v.detail, v.index, seq[v.index].action.node_id, 1.0, v.cause)


def _execution_fault(seq: AnnotatedStateSequence) -> Violation | None:
    for i, s in enumerate(seq):
        if s.failure_tag in EXECUTION_TAGS:
            tag = s.failure_tag
            return Violation(i, tag, f"The mission stopped with an {CAUSE_PHRASES['executor_fault']}." if tag == "executor_fault" else f"The mission {CAUSE_PHRASES['timeout']} during step {i} ({s.action.name}).")
    return None


def evaluate_oracle(seq: AnnotatedStateSequence, traj: SemanticTrajectory | None, goal: TaskGoalSpec | None) -> EvaluationVerdict:
    """Deterministic judge: every goal check runs over the full trajectory.

    The earliest violating step wins. A mission that meets every goal but
    was cut short by an executor fault or timeout is an ExecutionFailure.
    """
    if goal is None or not goal.checks:
        raise NoGoalSpec("no goal spec given")
    v = first_violation(goal, frames_from_sequence(seq), seq) or _execution_fault(seq)
    return SUCCESS if v is None else _verdict(seq, v)


def evaluate_final_state(seq: AnnotatedStateSequence, goal: TaskGoalSpec | None) -> EvaluationVerdict:
    """Baseline judge that only sees the terminal state; a failure is attributed to the last step."""
    if goal is None or not goal.checks:
        raise NoGoalSpec("no goal spec given")
    final = FinalState.of(seq)
    last = len(seq) - 1
    for check in goal.checks:
        v = check.terminal(final)
        if v is not None:
            return _verdict(seq, Violation(last, v.cause, v.detail))
    return SUCCESS


def evaluate_llm(traj: SemanticTrajectory, instruction: str, gateway: Gateway, seq: AnnotatedStateSequence | None = None) -> EvaluationVerdict:
    """Ask the model for a verdict on the full narrative.

    The reply's fault_index is the subscript j of t_j, i.e. Π index j - 1.
    Malformed replies are retried once and then raise MalformedVerdict.
    """
    n = len(traj.segments) + 1

    def coherent(obj: dict[str, Any]) -> None:
        j = obj["fault_index"]
        if obj["outcome"] == "Success":
            return
        if j is None or not 1 <= j <= n:
            raise ValueError(f"fault_index must be a step subscript in 1..{n} for a failure")
        if not obj["explanation"].strip():
            raise ValueError("a failure needs an explanation")

    request = OUTCOME_EVALUATION.render(instruction=instruction, narrative=traj.text)
    obj = gateway.ask_json(OUTCOME_EVALUATION, request, coherent)
    if obj["outcome"] == "Success":
        return SUCCESS
    idx = obj["fault_index"] - 1
    node = seq[idx].action.node_id if seq is not None and idx < len(seq) else None
    return EvaluationVerdict(obj["outcome"], obj["explanation"], idx, node, 1.0, classify_explanation(obj["explanation"]))


def verdict_to_wire(v: EvaluationVerdict) -> dict[str, Any]:
    """The JSON shape a model is asked to produce; used to build scripted transcripts."""
    j = None if v.fault_action_index is None else v.fault_action_index + 1
    return {"outcome": v.outcome, "explanation": v.explanation, "fault_index": j}


@dataclass(frozen=True)
class GroundTruth:
    failed: bool
    fault_index: int | None = None
    cause: str | None = None


@dataclass(frozen=True)
class EvaluationQualityMetrics:
    det: float
    loc: float
    exp: float
    failures: int

    def to_dict(self) -> dict[str, Any]:
        return {"det": self.det, "loc": self.loc, "exp": self.exp, "failures": self.failures}


def score_evaluation(verdicts: Sequence[EvaluationVerdict], ground_truth: Sequence[GroundTruth]) -> EvaluationQualityMetrics:
    """Det, Loc and Exp over the ground-truth failures."""
    if len(verdicts) != len(ground_truth):
        raise LengthMismatch(f"{len(verdicts)} verdicts vs {len(ground_truth)} ground-truth items")
    pairs = [(v, g) for v, g in zip(verdicts, ground_truth) if g.failed]
    if not pairs:
        raise MetricsUndefined("no failures in the ground truth")
    n = len(pairs)
    det = sum(v.failed for v, _ in pairs)
    loc = sum(v.failed and v.fault_action_index == g.fault_index for v, g in pairs)
    exp = sum(v.failed and classify_explanation(v.explanation) == g.cause for v, g in pairs)
    return EvaluationQualityMetrics(det / n, loc / n, exp / n, n)


__all__ = [
    "EXECUTION_TAGS",
    "OUTCOMES",
    "SUCCESS",
    "EvaluationQualityMetrics",
    "EvaluationVerdict",
    "GroundTruth",
    "MalformedVerdict",
    "evaluate_final_state",
    "evaluate_llm",
    "evaluate_oracle",
    "score_evaluation",
    "verdict_to_wire",
]
