"""Hierarchical plan analysis, structured experiences and node-level plan repair."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import jsonschema

from . import geometry as geo
from .bt import BehaviorTree, BlackboardRef, Node, diff_trees, param_value, parse_fragment, serialize_bt, validate_tree
from .cmsr import SemanticTrajectory
from .errors import (
    AnchorNotFound,
    NoFlawFound,
    PlanParseError,
    RepairError,
    StalePrecondition,
    UnconstructibleRepair,
    ValidationFailure,
)
from .evaluator import EvaluationVerdict
from .goals import FinalPosition, LandedOn, TaskGoalSpec
from .llm import HIERARCHICAL_ANALYSIS, REPAIR_PROPOSAL, REPAIR_SCHEMA, Gateway, extract_json
from .plans import downward_search, forward_search
from .vocabulary import CAPTURE_ACTIONS, COMPOSITES, DECORATORS, DEFAULT_SPACE, StrategySpace

log = logging.getLogger(__name__)

LAYERS = ("action", "logic", "mission")
APPLY_ORDER = ("mission", "logic", "action")  # coarse to fine
VERBS = ("InsertNode", "DeleteNode", "ReplaceNode", "ReorderChildren", "WrapWithDecorator", "RetargetParams")
MAX_PROPOSALS = 3
SEARCH_ALTITUDE = 1.5


@dataclass(frozen=True)
class RepairOp:
    verb: str
    anchor: str
    payload: Any = None

    def __post_init__(self) -> None:
        if self.verb not in VERBS:
            raise ValidationFailure(f"unknown repair verb {self.verb!r}")

    def describe(self) -> str:
        p = self.payload or {}
        if self.verb == "ReplaceNode" and "kind" in p:
            return f"ReplaceNode({self.anchor} -> {p['kind']})"
        if self.verb == "InsertNode":
            return f"InsertNode({self.anchor}[{p.get('position', 'end')}] <- {_squash(p.get('xml', ''))})"
        if self.verb == "ReplaceNode":
            return f"ReplaceNode({self.anchor} -> {_squash(p.get('xml', ''))})"
        if self.verb == "ReorderChildren":
            return f"ReorderChildren({self.anchor}: {', '.join(p.get('order', ()))})"
        if self.verb == "WrapWithDecorator":
            return f"WrapWithDecorator({self.anchor} in {p.get('decorator')})"
        if self.verb == "RetargetParams":
            return f"RetargetParams({self.anchor}: {json.dumps(p.get('params', {}), sort_keys=True)})"
        return f"DeleteNode({self.anchor})"

    def to_dict(self) -> dict[str, Any]:
        return {"verb": self.verb, "anchor": self.anchor, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RepairOp:
        return cls(str(d["verb"]), str(d["anchor"]), d.get("payload"))


def _squash(xml: str) -> str:
    return " ".join(xml.split())


@dataclass(frozen=True)
class FlawReport:
    layer: str
    node_id: str | None
    description: str
    evidence: int | None = None  # fault_action_index the flaw explains
    # deterministic analyzers attach their repair directly
    repair: RepairOp | None = field(default=None, compare=False)
    rationale: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.layer not in LAYERS:
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.layer != "mission" and self.node_id is None:
            raise ValueError(f"{self.layer} flaws must name a node")


@dataclass(frozen=True)
class ReflectiveExperience:
    stratum: str
    operation: RepairOp
    rationale: str
    task_unit: int
    iteration: int
    instruction: str = ""

    def __post_init__(self) -> None:
        if self.stratum not in LAYERS:
            raise ValueError(f"unknown stratum {self.stratum!r}")
        if not self.rationale.strip():
            raise ValueError("rationale must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_unit": self.task_unit,
            "iteration": self.iteration,
            "stratum": self.stratum,
            "op": self.operation.to_dict(),
            "rationale": self.rationale,
            "instruction": self.instruction,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ReflectiveExperience:
        return cls(d["stratum"], RepairOp.from_dict(d["op"]), d["rationale"], int(d["task_unit"]), int(d["iteration"]), d.get("instruction", ""))


class ExperienceSink(Protocol):
    def append(self, experiences: Sequence[ReflectiveExperience]) -> Any: ...


# -- validation and application ----------------------------------------------------------


def _fragment(xml: str, tree: BehaviorTree, space: StrategySpace) -> tuple[str, dict[str, Node]]:
    try:
        return parse_fragment(xml, set(tree.nodes), space)
    except PlanParseError as exc:
        raise ValidationFailure(f"payload rejected: {type(exc).__name__}: {exc}") from exc


def validate_op(op: RepairOp, space: StrategySpace = DEFAULT_SPACE, tree: BehaviorTree | None = None) -> None:
    """Check the op only uses strategy-space members; with a tree, also check its anchor and payload shape."""
    p = op.payload if isinstance(op.payload, Mapping) else {}
    if op.verb in ("InsertNode", "ReplaceNode") and "xml" in p:
        # fragment parse enforces action/logic membership
        _fragment(str(p["xml"]), tree or BehaviorTree("x", {}), space)
    if op.verb == "ReplaceNode" and "kind" in p and (p["kind"] not in COMPOSITES or p["kind"] not in space.logic_space):
        raise ValidationFailure(f"{p['kind']!r} is not a composite in the logic space")
    if op.verb == "ReplaceNode" and not ({"kind", "xml"} & set(p)):
        raise ValidationFailure("ReplaceNode needs a 'kind' or 'xml' payload")
    if op.verb == "InsertNode" and "xml" not in p:
        raise ValidationFailure("InsertNode needs an 'xml' payload")
    if op.verb == "WrapWithDecorator" and (p.get("decorator") not in DECORATORS or p.get("decorator") not in space.logic_space):
        raise ValidationFailure(f"{p.get('decorator')!r} is not a decorator in the logic space")
    if op.verb == "ReorderChildren" and not isinstance(p.get("order"), list):
        raise ValidationFailure("ReorderChildren needs an 'order' list")
    if op.verb == "RetargetParams" and not isinstance(p.get("params"), Mapping):
        raise ValidationFailure("RetargetParams needs a 'params' map")
    if tree is not None and op.anchor not in tree:
        raise AnchorNotFound(f"anchor {op.anchor!r} is not in the tree")


def _fresh_id(nodes: Mapping[str, Node]) -> str:
    k = len(nodes)
    while f"n{k}" in nodes:
        k += 1
    return f"n{k}"


def _replace_child(nodes: dict[str, Node], parent: str | None, old: str, new: str) -> None:
    if parent is None:
        return
    pn = nodes[parent]
    nodes[parent] = Node(pn.id, pn.kind, pn.name, pn.params, tuple(new if c == old else c for c in pn.children))


def apply_op(tree: BehaviorTree, op: RepairOp, space: StrategySpace = DEFAULT_SPACE) -> BehaviorTree:
    """Apply one repair and return a new validated tree; the input is never modified."""
    validate_op(op, space, tree)
    p = op.payload if isinstance(op.payload, Mapping) else {}
    nodes = dict(tree.nodes)
    root = tree.root
    anchor = nodes[op.anchor]
    parent = tree.parent_of(op.anchor)
    if op.verb == "InsertNode":
        if anchor.kind not in COMPOSITES:
            raise ValidationFailure(f"cannot insert under {anchor.kind} {op.anchor}")
        frag_root, frag = _fragment(str(p["xml"]), tree, space)
        pos = p.get("position", len(anchor.children))
        if not isinstance(pos, int) or not 0 <= pos <= len(anchor.children):
            raise ValidationFailure(f"insert position {pos!r} out of range for {op.anchor}")
        nodes.update(frag)
        kids = list(anchor.children)
        kids.insert(pos, frag_root)
        nodes[op.anchor] = Node(anchor.id, anchor.kind, anchor.name, anchor.params, tuple(kids))
    elif op.verb == "DeleteNode":
        if parent is None:
            raise ValidationFailure("cannot delete the root")
        for nid in tree.subtree_ids(op.anchor):
            del nodes[nid]
        pn = nodes[parent]
        nodes[parent] = Node(pn.id, pn.kind, pn.name, pn.params, tuple(c for c in pn.children if c != op.anchor))
    elif op.verb == "ReplaceNode" and "kind" in p:
        if anchor.kind not in COMPOSITES:
            raise ValidationFailure(f"only composites change kind; {op.anchor} is {anchor.kind}")
        kind = str(p["kind"])
        params = {"success_threshold": str(len(anchor.children))} if kind == "Parallel" else {}
        nodes[op.anchor] = Node(anchor.id, kind, kind, params, anchor.children)
    elif op.verb == "ReplaceNode":
        if not anchor.is_leaf:
            raise ValidationFailure(f"xml replacement would drop the children of {op.anchor}; change its kind instead")
        frag_root, frag = _fragment(str(p["xml"]), tree, space)
        # the fragment root inherits the anchor's id so references to it stay valid
        top = frag.pop(frag_root)
        frag[op.anchor] = Node(op.anchor, top.kind, top.name, top.params, top.children)
        del nodes[op.anchor]
        nodes.update(frag)
    elif op.verb == "ReorderChildren":
        order = [str(c) for c in p["order"]]
        if sorted(order) != sorted(anchor.children):
            raise ValidationFailure(f"order must be a permutation of {list(anchor.children)}")
        nodes[op.anchor] = Node(anchor.id, anchor.kind, anchor.name, anchor.params, tuple(order))
    elif op.verb == "WrapWithDecorator":
        params = {str(k): param_value(str(v)) for k, v in (p.get("params") or {}).items()}
        dec_id = _fresh_id(nodes)
        nodes[dec_id] = Node(dec_id, "Decorator", str(p["decorator"]), params, (op.anchor,))
        if parent is None:
            root = dec_id
        else:
            _replace_child(nodes, parent, op.anchor, dec_id)
    elif op.verb == "RetargetParams":
        params = dict(anchor.params)
        for k, v in p["params"].items():
            params[str(k)] = param_value(geo.fmt_num(v) if isinstance(v, (int, float)) else str(v))
        nodes[op.anchor] = Node(anchor.id, anchor.kind, anchor.name, params, anchor.children)
    try:
        validate_tree(root, nodes, space)
    except PlanParseError as exc:
        raise ValidationFailure(f"{op.describe()} produced an invalid tree: {exc}") from exc
    new = BehaviorTree(root, nodes)
    if not diff_trees(tree, new):
        raise StalePrecondition(f"{op.describe()} changes nothing")
    return new


def apply_experience(tree: BehaviorTree, e: ReflectiveExperience, space: StrategySpace = DEFAULT_SPACE) -> BehaviorTree:
    return apply_op(tree, e.operation, space)


# -- deterministic analyzers ------------------------------------------------------------------


def _capture_kind(node: Node) -> str | None:
    if node.name in CAPTURE_ACTIONS:
        return str(node.params.get("kind"))
    return None


def _is_attempt(tree: BehaviorTree, nid: str, kind: str) -> bool:
    """A direct look for `kind`, or a Sequence whose last step is one."""
    node = tree[nid]
    if _capture_kind(node) == kind:
        return True
    return node.kind == "Sequence" and _capture_kind(tree[node.children[-1]]) == kind


def _preorder_index(tree: BehaviorTree) -> dict[str, int]:
    return {n.id: i for i, n in enumerate(tree.walk())}


def _has_search_before(tree: BehaviorTree, nid: str, kind: str) -> bool:
    """Is there a Fallback over several looks for `kind` ticked before `nid` (or enclosing it)?"""
    order = _preorder_index(tree)
    enclosing = set(tree.ancestors(nid))
    for node in tree.walk():
        if node.kind != "Fallback" or len(node.children) < 2:
            continue
        if node.id not in enclosing and order[node.id] > order[nid]:
            continue
        if sum(_is_attempt(tree, c, kind) for c in node.children) >= 2:
            return True
    return False


def _reads_blackboard(node: Node) -> bool:
    return any(isinstance(v, BlackboardRef) for v in node.params.values())


def _search_xml(tree: BehaviorTree, kind: str) -> str:
    downward = kind == "LandingMark" or any(n.name == "DownwardDetect" and _capture_kind(n) == kind for n in tree.walk())
    return downward_search(kind, SEARCH_ALTITUDE) if downward else forward_search(kind)


def _dependency_kind(tree: BehaviorTree, nid: str) -> str | None:
    """Which object a blackboard-reading node depends on: the first look in the plan after it, else any look."""
    order = _preorder_index(tree)
    looks = [n for n in tree.walk() if _capture_kind(n)]
    later = [n for n in looks if order[n.id] > order[nid]]
    pick = (later or looks)
    return _capture_kind(pick[0]) if pick else None


def _insertion_point(tree: BehaviorTree, nid: str) -> tuple[str, int] | None:
    """Nearest enclosing Sequence and the index of the child that contains `nid`."""
    child = nid
    for anc in tree.ancestors(nid):
        node = tree[anc]
        if node.kind == "Sequence":
            return anc, node.children.index(child)
        child = anc
    return None


def analyze_logic(tree: BehaviorTree, locus: str | None) -> list[FlawReport]:
    """Sequences that chain alternative looks for the same object should be Fallbacks."""
    flaws: list[FlawReport] = []
    for node in tree.walk():
        if node.kind != "Sequence" or len(node.children) < 2:
            continue
        kinds = {_capture_kind(tree[c]) or (_capture_kind(tree[tree[c].children[-1]]) if tree[c].kind == "Sequence" else None) for c in node.children}
        for kind in sorted(k for k in kinds if k):
            if sum(_is_attempt(tree, c, kind) for c in node.children) >= 2:
                op = RepairOp("ReplaceNode", node.id, {"kind": "Fallback"})
                flaws.append(
                    FlawReport(
                        "logic",
                        node.id,
                        f"Using Sequence where Fallback required: {node.id} chains alternative looks for {kind}, so the first miss aborts the search",
                        None,
                        op,
                        "Replace Sequence with Fallback so that the drone can attempt different strategies until one finds the target",
                    )
                )
                break
    return flaws


def analyze_action(tree: BehaviorTree, locus: str | None, claimed: set[str]) -> list[FlawReport]:
    """Looks or blackboard reads at the fault locus with no search ahead of them."""
    if locus is None or locus not in tree:
        return []
    node = tree[locus]
    kind = _capture_kind(node) or (_dependency_kind(tree, locus) if _reads_blackboard(node) else None)
    if kind is None or _has_search_before(tree, locus, kind):
        return []
    if claimed & set(tree.ancestors(locus)):
        return []  # a logic repair already turns the enclosing chain into a search
    where = _insertion_point(tree, locus)
    if where is None:
        return []
    parent, pos = where
    op = RepairOp("InsertNode", parent, {"xml": _search_xml(tree, kind), "position": pos})
    what = f"{node.name} for {kind}" if _capture_kind(node) else f"{node.name} reads the {kind} position"
    return [
        FlawReport(
            "action",
            locus,
            f"Lack actions for searching objectives: {what} with no search before it",
            None,
            op,
            f"Insert a search for the {kind} before {locus} so the target is in view and its position is on the blackboard",
        )
    ]


def analyze_mission(tree: BehaviorTree, goal: TaskGoalSpec | None, verdict: EvaluationVerdict) -> list[FlawReport]:
    """The plan never flies to the coordinate the task asks for."""
    if goal is None or verdict.cause not in ("target_not_reached", "not_landed_on_target"):
        return []
    targets = [c.target for c in goal.checks if isinstance(c, (FinalPosition, LandedOn))]
    flies = [n for n in tree.walk() if n.name == "FlyToCoordinates" and not _reads_blackboard(n)]
    if not targets or not flies:
        return []
    tx, ty = targets[0]
    if any(geo.dist2d((float(n.params["x"]), float(n.params["y"])), (tx, ty)) <= 0.3 for n in flies):
        return []
    last = flies[-1]
    op = RepairOp("RetargetParams", last.id, {"params": {"x": tx, "y": ty}})
    return [
        FlawReport(
            "mission",
            None,
            f"The plan never flies to the task target ({geo.fmt_num(tx)}, {geo.fmt_num(ty)}); its last waypoint is ({last.params['x']}, {last.params['y']})",
            verdict.fault_action_index,
            op,
            f"The task goal is ({geo.fmt_num(tx)}, {geo.fmt_num(ty)}), so the final leg must end there",
        )
    ]


def _llm_analysis(tree: BehaviorTree, verdict: EvaluationVerdict, traj: SemanticTrajectory | None, instruction: str, gateway: Gateway) -> list[FlawReport]:
    def known_nodes(obj: dict[str, Any]) -> None:
        for f in obj["flaws"]:
            nid = f.get("node_id")
            if f["layer"] != "mission" and nid not in tree:
                raise ValueError(f"node {nid!r} is not in the plan")

    request = HIERARCHICAL_ANALYSIS.render(
        instruction=instruction or "(unknown)",
        plan=serialize_bt(tree),
        narrative=traj.text if traj is not None else "(none)",
        verdict=json.dumps(verdict.to_dict()),
    )
    obj = gateway.ask_json(HIERARCHICAL_ANALYSIS, request, known_nodes)
    return [
        FlawReport(f["layer"], f.get("node_id"), f["description"], verdict.fault_action_index)
        for f in obj["flaws"]
    ]


def hierarchical_analysis(
    tree: BehaviorTree,
    verdict: EvaluationVerdict,
    traj: SemanticTrajectory | None,
    *,
    goal: TaskGoalSpec | None = None,
    gateway: Gateway | None = None,
    instruction: str = "",
) -> tuple[list[FlawReport], list[FlawReport], list[FlawReport]]:
    """Flaws at the action, logic and mission layers.

    The deterministic matchers for the two dependency / control-flow classes
    and the target mismatch run first; the model is consulted only when they
    find nothing.
    """
    if not verdict.failed:
        raise ValueError("analysis needs a failure verdict")
    locus = verdict.fault_node_id
    f_logic = analyze_logic(tree, locus)
    f_action = analyze_action(tree, locus, {f.node_id for f in f_logic if f.node_id})
    f_mission = analyze_mission(tree, goal, verdict)
    if not (f_action or f_logic or f_mission) and gateway is not None:
        flaws = _llm_analysis(tree, verdict, traj, instruction or (goal.instruction if goal else ""), gateway)
        f_action = [f for f in flaws if f.layer == "action"]
        f_logic = [f for f in flaws if f.layer == "logic"]
        f_mission = [f for f in flaws if f.layer == "mission"]
    for flaws in (f_action, f_logic, f_mission):
        for i, f in enumerate(flaws):
            if f.evidence is None:
                flaws[i] = FlawReport(f.layer, f.node_id, f.description, verdict.fault_action_index, f.repair, f.rationale)
    if not (f_action or f_logic or f_mission):
        raise NoFlawFound(f"no flaw explains the failure at step {verdict.fault_action_index}")
    return f_action, f_logic, f_mission


def generate_experience(
    flaw: FlawReport,
    space: StrategySpace,
    gateway: Gateway | None,
    *,
    tree: BehaviorTree,
    task_unit: int = 0,
    iteration: int = 1,
    instruction: str = "",
) -> ReflectiveExperience:
    """Turn a flaw into ⟨layer, operation + rationale⟩, re-prompting invalid proposals up to 3 times."""
    if flaw.repair is not None:
        validate_op(flaw.repair, space, tree)
        return ReflectiveExperience(flaw.layer, flaw.repair, flaw.rationale or flaw.description, task_unit, iteration, instruction)
    if gateway is None:
        raise UnconstructibleRepair(f"no deterministic repair for: {flaw.description}")
    request = REPAIR_PROPOSAL.render(
        plan=serialize_bt(tree),
        layer=flaw.layer,
        node_id=flaw.node_id or "none",
        description=flaw.description,
        node_docs=space.node_docs(),
    )
    problem = ""
    for attempt in range(MAX_PROPOSALS):
        reply = gateway.send(request)
        try:
            obj = extract_json(reply)
            jsonschema.validate(obj, REPAIR_SCHEMA)
            op = RepairOp.from_dict(obj)
            apply_op(tree, op, space)  # dry run: the proposal must apply cleanly
            return ReflectiveExperience(flaw.layer, op, obj["rationale"], task_unit, iteration, instruction)
        except (ValueError, jsonschema.ValidationError, RepairError) as exc:
            problem = exc.message if isinstance(exc, jsonschema.ValidationError) else f"{type(exc).__name__}: {exc}"
            log.info("repair proposal %d rejected: %s", attempt + 1, problem)
            request = request.followup(reply, f"That repair is invalid ({problem}). Propose a corrected repair as JSON.")
    raise UnconstructibleRepair(f"{MAX_PROPOSALS} invalid proposals; last problem: {problem}")


@dataclass
class RefineOutcome:
    tree: BehaviorTree
    experiences: list[ReflectiveExperience]
    applied: list[ReflectiveExperience]
    errors: list[str]


def refine(
    tree: BehaviorTree,
    verdict: EvaluationVerdict,
    traj: SemanticTrajectory | None,
    space: StrategySpace = DEFAULT_SPACE,
    exp_base: ExperienceSink | None = None,
    gateway: Gateway | None = None,
    *,
    goal: TaskGoalSpec | None = None,
    task_unit: int = 0,
    iteration: int = 1,
    instruction: str = "",
) -> RefineOutcome:
    """One refinement pass with a full account of what applied and what did not."""
    instruction = instruction or (goal.instruction if goal else "")
    try:
        f_action, f_logic, f_mission = hierarchical_analysis(tree, verdict, traj, goal=goal, gateway=gateway, instruction=instruction)
    except NoFlawFound as exc:
        log.warning("%s; plan left unchanged", exc)
        return RefineOutcome(tree, [], [], [str(exc)])
    by_layer = {"action": f_action, "logic": f_logic, "mission": f_mission}
    current, made, applied, errors = tree, [], [], []
    for layer in APPLY_ORDER:
        for flaw in by_layer[layer]:
            try:
                e = generate_experience(flaw, space, gateway, tree=current, task_unit=task_unit, iteration=iteration, instruction=instruction)
            except RepairError as exc:
                errors.append(f"{flaw.layer}: {exc}")
                continue
            made.append(e)
            try:
                current = apply_experience(current, e, space)
                applied.append(e)
            except RepairError as exc:
                errors.append(f"{e.operation.describe()}: {exc}")
    if exp_base is not None and made:
        exp_base.append(made)
    return RefineOutcome(current, made, applied, errors)


def refine_iteration(
    tree: BehaviorTree,
    verdict: EvaluationVerdict,
    traj: SemanticTrajectory | None,
    space: StrategySpace = DEFAULT_SPACE,
    exp_base: ExperienceSink | None = None,
    gateway: Gateway | None = None,
    **kwargs: Any,
) -> tuple[BehaviorTree, list[ReflectiveExperience]]:
    """Analyze, generate one experience per flaw and apply them Mission, then logic, then action."""
    out = refine(tree, verdict, traj, space, exp_base, gateway, **kwargs)
    return out.tree, out.experiences


__all__ = [name for name in dir() if not name.startswith("_")]
