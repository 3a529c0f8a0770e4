"""Closed-loop mission driver, suite metrics and the injected-failure corpus."""

from __future__ import annotations

import json
import logging
import time
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

from .bt import BehaviorTree, Node, serialize_bt
from .cmsr import SemanticTrajectory, cmsr
from .errors import BTReflexError, GatewayError, RepairError
from .evaluator import (
    EvaluationQualityMetrics,
    EvaluationVerdict,
    GroundTruth,
    evaluate_final_state,
    evaluate_llm,
    evaluate_oracle,
    score_evaluation,
)
from .experience import ExperienceBase
from .goals import goal_for, ground_truth_violation
from .llm import Gateway, MockProvider, generate_plan
from .mission import MissionResult, execute_mission
from .plans import ONE_SHOT_SAMPLE, reference_plan
from .refiner import ReflectiveExperience, RepairOp, apply_op, refine
from .scenes import CATEGORIES, INSTRUCTIONS, RANDOMIZED, category_of, load_scene
from .vocabulary import DEFAULT_SPACE, StrategySpace

log = logging.getLogger(__name__)

MAX_ITERS = 5
DEFAULT_TRIALS = 10
EVALUATOR_MODES = ("oracle", "llm")


@dataclass
class IterationTrace:
    iteration: int
    tree_digest: str | None
    verdict: EvaluationVerdict | None
    experiences: list[ReflectiveExperience]
    wall_time: float
    mission_status: str | None = None
    error: str | None = None
    plan_xml: str | None = None
    narrative: str | None = None
    trajectory_jsonl: str | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.iteration <= MAX_ITERS:
            raise ValueError(f"iteration {self.iteration} outside 1..{MAX_ITERS}")

    @property
    def succeeded(self) -> bool:
        return self.verdict is not None and not self.verdict.failed

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "tree_digest": self.tree_digest,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "experiences": [e.to_dict() for e in self.experiences],
            "wall_time": self.wall_time,
            "mission_status": self.mission_status,
            "error": self.error,
        }


@dataclass
class MissionRun:
    task_id: int
    seed: int
    status: str  # "Success" | "Failure"
    traces: list[IterationTrace]

    @property
    def success_iteration(self) -> int | None:
        for t in self.traces:
            if t.succeeded:
                return t.iteration
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"task_id": self.task_id, "seed": self.seed, "status": self.status, "traces": [t.to_dict() for t in self.traces]}


def _evaluate(mode: str, result: MissionResult, traj: SemanticTrajectory | None, goal: Any, gateway: Gateway | None) -> EvaluationVerdict:
    if mode == "oracle":
        return evaluate_oracle(result.sequence, traj, goal)
    if gateway is None:
        raise GatewayError("llm evaluation needs a gateway")
    if traj is None:
        raise BTReflexError("mission too short to narrate")
    return evaluate_llm(traj, goal.instruction, gateway, result.sequence)


def run_mission_loop(
    task_id: int,
    gateway: Gateway | None,
    exp_base: ExperienceBase | None,
    max_iters: int = MAX_ITERS,
    *,
    seed: int = 0,
    evaluator_mode: str = "oracle",
    space: StrategySpace = DEFAULT_SPACE,
    initial_plan: BehaviorTree | None = None,
    keep_artifacts: bool = False,
) -> tuple[str, list[IterationTrace]]:
    """Plan, execute, capture, narrate, evaluate and refine until Success or the iteration cap."""
    if not 1 <= max_iters <= MAX_ITERS:
        raise ValueError(f"max_iters must be in 1..{MAX_ITERS}")
    if evaluator_mode not in EVALUATOR_MODES:
        raise ValueError(f"unknown evaluator mode {evaluator_mode!r}")
    scene = load_scene(task_id, seed)
    goal = goal_for(scene)
    tree = initial_plan
    traces: list[IterationTrace] = []
    for i in range(1, max_iters + 1):
        start = time.perf_counter()
        trace = IterationTrace(i, None, None, [], 0.0)
        try:
            if tree is None:
                if gateway is None:
                    raise GatewayError("plan generation needs a gateway")
                retrieved = exp_base.retrieve(scene.instruction) if exp_base is not None and len(exp_base) else []
                tree = generate_plan(scene.instruction, space.node_docs(), ONE_SHOT_SAMPLE, retrieved, gateway, scene.context, space)
            trace.tree_digest = tree.digest()
            result = execute_mission(tree, scene.world)
            trace.mission_status = result.status
            traj = cmsr(result.sequence, scene.world) if len(result.sequence) >= 2 else None
            if keep_artifacts:
                trace.plan_xml = serialize_bt(tree)
                trace.narrative = traj.text if traj is not None else ""
                trace.trajectory_jsonl = result.sequence.to_jsonl()
            trace.verdict = _evaluate(evaluator_mode, result, traj, goal, gateway)
            if not trace.verdict.failed:
                trace.wall_time = time.perf_counter() - start
                traces.append(trace)
                return "Success", traces
            if i < max_iters:
                out = refine(
                    tree, trace.verdict, traj, space, exp_base, gateway,
                    goal=goal, task_unit=task_id, iteration=i, instruction=scene.instruction,
                )
                trace.experiences = out.experiences
                if out.errors:
                    trace.error = "; ".join(out.errors)
                tree = out.tree
        except BTReflexError as exc:
            # a faulted iteration counts as failed; the loop carries on
            log.warning("task %d iteration %d faulted: %s", task_id, i, exc)
            trace.error = f"{type(exc).__name__}: {exc}"
        trace.wall_time = time.perf_counter() - start
        traces.append(trace)
    return "Failure", traces


def transcript_path(task_id: int) -> Path:
    """Checked-in mock transcript for a benchmark task."""
    return Path(str(resources.files("btreflex") / "fixtures" / "transcripts" / f"task_{task_id:02d}.yaml"))


def fixture_gateway(task_id: int) -> Gateway:
    """A fresh scripted gateway for one mission of `task_id`."""
    return Gateway(MockProvider.from_file(transcript_path(task_id)))


# -- suite ----------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    runs: list[MissionRun]
    n_total: int
    n_success_per_iteration: list[int]
    sr: float
    per_task: dict[int, dict[str, Any]]
    per_category: dict[str, dict[str, Any]]
    injection: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_total": self.n_total,
            "n_success_per_iteration": self.n_success_per_iteration,
            "sr": self.sr,
            "per_task": {str(k): v for k, v in self.per_task.items()},
            "per_category": self.per_category,
            "injection": self.injection,
            "runs": [r.to_dict() for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        lines = [
            "| Type | Task | Instruction | Trials | SR | " + " | ".join(f"i={i}" for i in range(1, MAX_ITERS + 1)) + " |",
            "|---|---|---|---|---|" + "---|" * MAX_ITERS,
        ]
        for cat, ids in CATEGORIES.items():
            for t in ids:
                if t not in self.per_task:
                    continue
                row = self.per_task[t]
                its = " | ".join(str(n) for n in row["n_success_per_iteration"])
                lines.append(f"| {cat} | {t} | {INSTRUCTIONS[t]} | {row['trials']} | {row['sr']:.2f} | {its} |")
        lines += ["", "| Type | Trials | SR |", "|---|---|---|"]
        for cat, row in self.per_category.items():
            lines.append(f"| {cat} | {row['trials']} | {row['sr']:.2f} |")
        lines.append(f"| All | {self.n_total} | {self.sr:.2f} |")
        if self.injection:
            ev, base = self.injection["evaluator"], self.injection["baseline"]
            lines += [
                "",
                f"Injected failures: {self.injection['cases']}",
                "",
                "| Evaluator | Det | Loc | Exp |",
                "|---|---|---|---|",
                f"| {self.injection['mode']} | {ev['det']:.4f} | {ev['loc']:.4f} | {ev['exp']:.4f} |",
                f"| final-state | {base['det']:.4f} | {base['loc']:.4f} | {base['exp']:.4f} |",
            ]
        return "\n".join(lines) + "\n"


def _tally(runs: Iterable[MissionRun]) -> tuple[int, list[int]]:
    runs = list(runs)
    per_iter = [0] * MAX_ITERS
    for r in runs:
        k = r.success_iteration
        if k is not None:
            per_iter[k - 1] += 1
    return len(runs), per_iter


def build_report(runs: Sequence[MissionRun]) -> MetricsReport:
    """SR = Σᵢ N_success^(i) / N_total, per task, per category and overall."""
    n, per_iter = _tally(runs)
    per_task: dict[int, dict[str, Any]] = {}
    for t in sorted({r.task_id for r in runs}):
        tn, ti = _tally(r for r in runs if r.task_id == t)
        per_task[t] = {"trials": tn, "n_success_per_iteration": ti, "sr": sum(ti) / tn, "category": category_of(t)}
    per_category: dict[str, dict[str, Any]] = {}
    for cat, ids in CATEGORIES.items():
        cn, ci = _tally(r for r in runs if r.task_id in ids)
        if cn:
            per_category[cat] = {"trials": cn, "n_success_per_iteration": ci, "sr": sum(ci) / cn}
    return MetricsReport(list(runs), n, per_iter, sum(per_iter) / n if n else 0.0, per_task, per_category)


def run_suite(
    task_ids: Sequence[int],
    trials_per_task: int,
    gateway_for: Callable[[int], Gateway | None],
    seed: int = 0,
    *,
    exp_base: ExperienceBase | None = None,
    evaluator_mode: str = "oracle",
    max_iters: int = MAX_ITERS,
    jobs: int = 1,
) -> MetricsReport:
    """Run every (task, trial) mission loop. Trial j of a randomized task uses scene seed `seed + j`."""
    if trials_per_task < 1:
        raise ValueError("trials_per_task must be >= 1")
    if not task_ids:
        raise ValueError("no tasks selected")
    plan = [(t, seed + j if t in RANDOMIZED else seed) for t in task_ids for j in range(trials_per_task)]

    def one(item: tuple[int, int]) -> MissionRun:
        t, s = item
        status, traces = run_mission_loop(t, gateway_for(t), exp_base, max_iters, seed=s, evaluator_mode=evaluator_mode)
        return MissionRun(t, s, status, traces)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(one, plan))  # map keeps input order
    else:
        runs = [one(item) for item in plan]
    return build_report(runs)


# -- injected-failure corpus --------------------------------------------------------------------


TEMPLATES = (
    "wrong_waypoint",
    "skipped_corner",
    "zone_crossing",
    "missing_search",
    "seq_fallback_swap",
    "missing_precondition",
    "wrong_turn_direction",
    "premature_land",
)


@dataclass(frozen=True)
class FaultInjection:
    case_id: str
    task_id: int
    seed: int
    template: str
    mutation: RepairOp
    expected_cause: str
    expected_index: int

    def plan(self) -> BehaviorTree:
        return apply_op(reference_plan(self.task_id), self.mutation)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "task_id": self.task_id,
            "seed": self.seed,
            "template": self.template,
            "mutation": self.mutation.to_dict(),
            "expected_cause": self.expected_cause,
            "expected_index": self.expected_index,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FaultInjection:
        return cls(d["case_id"], int(d["task_id"]), int(d["seed"]), d["template"], RepairOp.from_dict(d["mutation"]), d["expected_cause"], int(d["expected_index"]))


def _nodes(tree: BehaviorTree, pred: Callable[[Node], bool]) -> list[Node]:
    return [n for n in tree.walk() if pred(n)]


def _flies(tree: BehaviorTree) -> list[Node]:
    return _nodes(tree, lambda n: n.name == "FlyToCoordinates" and "{" not in str(n.params.get("x")))


def _fly_xml(x: float, y: float, z: float) -> str:
    return f'<FlyToCoordinates x="{x:g}" y="{y:g}" z="{z:g}"/>'


def _search(tree: BehaviorTree) -> Node:
    return _nodes(tree, lambda n: n.kind == "Fallback")[0]


def _mutations(template: str, task: int) -> Iterator[RepairOp]:
    """Candidate inverse repairs for one template on one task's reference plan."""
    tree = reference_plan(task)
    root = tree[tree.root]
    if template == "wrong_waypoint":
        for n in _flies(tree):
            x, y, z = (float(n.params[k]) for k in "xyz")
            for dx, dy, dz in ((0.6, 0, 0), (0, 0.6, 0), (-0.6, 0, 0), (0, -0.6, 0), (0, 0, 0.5)):
                yield RepairOp("RetargetParams", n.id, {"params": {"x": x + dx, "y": y + dy, "z": z + dz}})
    elif template == "skipped_corner":
        for n in _flies(tree):
            yield RepairOp("DeleteNode", n.id)
    elif template == "zone_crossing" and task in (3, 11):
        first = _flies(tree)[0]
        for x, y in ((4, 1), (1, 3), (2, 0.2), (1.5, -0.2), (1, 0)):
            yield RepairOp("ReplaceNode", first.id, {"xml": _fly_xml(x, y, 1.5)})
    elif template == "missing_search" and task in (4, 5, 6, 10):
        yield RepairOp("DeleteNode", _search(tree).id)
    elif template == "seq_fallback_swap" and task in (4, 5, 6, 10):
        yield RepairOp("ReplaceNode", _search(tree).id, {"kind": "Sequence"})
    elif template == "missing_precondition":
        yield RepairOp("DeleteNode", _nodes(tree, lambda n: n.name == "Takeoff")[0].id)
    elif template == "wrong_turn_direction":
        for n in _nodes(tree, lambda n: n.name == "TurnLeft"):
            yield RepairOp("ReplaceNode", n.id, {"xml": f'<TurnRight angle="{n.params["angle"]}"/>'})
        if task == 1:
            kids = list(root.children)
            kids[1], kids[2] = kids[2], kids[1]  # turn before flying forward
            yield RepairOp("ReorderChildren", root.id, {"order": kids})
            turn = _nodes(tree, lambda n: n.name == "TurnLeft")[0]
            yield RepairOp("RetargetParams", turn.id, {"params": {"angle": 45}})
    elif template == "premature_land":
        for pos in range(2, len(root.children) - 1):
            yield RepairOp("InsertNode", root.id, {"xml": "<Land/>", "position": pos})


def _seeds(task: int, template: str, n_seeds: int) -> range:
    return range(n_seeds) if task in RANDOMIZED else range(1)


def build_corpus(n_seeds: int = 4) -> list[FaultInjection]:
    """All template mutations that parse, validate and really fail, with ground truth from raw 100 Hz frames."""
    corpus: list[FaultInjection] = []
    for template in TEMPLATES:
        for task in range(1, 12):
            for k, op in enumerate(_mutations(template, task)):
                try:
                    tree = apply_op(reference_plan(task), op)
                except RepairError:
                    continue
                for seed in _seeds(task, template, n_seeds):
                    scene = load_scene(task, seed)
                    result = execute_mission(tree, scene.world)
                    v = ground_truth_violation(goal_for(scene), result.sequence, result.samples)
                    if v is None:
                        continue  # the mutation happened to be harmless
                    case_id = f"{template}-t{task}-m{k}-s{seed}"
                    corpus.append(FaultInjection(case_id, task, seed, template, op, v.cause, v.index))
    return corpus


def corpus_to_json(corpus: Sequence[FaultInjection]) -> str:
    return json.dumps([c.to_dict() for c in corpus], indent=1)


def corpus_from_json(text: str) -> list[FaultInjection]:
    return [FaultInjection.from_dict(d) for d in json.loads(text)]


@dataclass
class InjectionReport:
    mode: str
    evaluator: EvaluationQualityMetrics
    baseline: EvaluationQualityMetrics
    rows: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode, "cases": len(self.rows), "evaluator": self.evaluator.to_dict(), "baseline": self.baseline.to_dict()}


def inject_and_score(corpus: Sequence[FaultInjection], evaluator_mode: str = "oracle", gateway: Gateway | None = None) -> InjectionReport:
    """Execute every mutated plan; score the chosen evaluator and the final-state baseline against ground truth."""
    if not corpus:
        raise ValueError("empty corpus")
    verdicts, baseline, truth, rows = [], [], [], []
    for case in corpus:
        scene = load_scene(case.task_id, case.seed)
        goal = goal_for(scene)
        result = execute_mission(case.plan(), scene.world)
        traj = cmsr(result.sequence, scene.world) if len(result.sequence) >= 2 else None
        v = _evaluate(evaluator_mode, result, traj, goal, gateway)
        b = evaluate_final_state(result.sequence, goal)
        verdicts.append(v)
        baseline.append(b)
        truth.append(GroundTruth(True, case.expected_index, case.expected_cause))
        rows.append({"case_id": case.case_id, "verdict": v.to_dict(), "baseline": b.to_dict()})
    return InjectionReport(evaluator_mode, score_evaluation(verdicts, truth), score_evaluation(baseline, truth), rows)


__all__ = [name for name in dir() if not name.startswith("_")]
