"""Behavior trees: XML parsing, canonical serialization, and tick execution.

Sequence and Fallback keep memory of their running child: a child that
returned Running is re-entered on the next tick and earlier siblings that
already succeeded (or failed, for Fallback) are not ticked again.
"""

from __future__ import annotations

import enum
import hashlib
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Protocol
from xml.sax.saxutils import escape

from .errors import (
    BlackboardKeyError,
    BTSyntaxError,
    ExecutorFault,
    SchemaError,
    UnknownActionError,
)
from .vocabulary import COMPOSITES, DECORATOR_PARAMS, DECORATORS, DEFAULT_SPACE, StrategySpace

_TAG_RE = re.compile(r"^[A-Z][A-Za-z0-9]*$")
_REF_RE = re.compile(r"^\{([A-Za-z_][A-Za-z0-9_]*)\}$")
_ID_RE = re.compile(r"^n(\d+)$")


class TickStatus(enum.Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    RUNNING = "Running"


class TimeoutFailure(enum.Enum):
    """Returned by :func:`run_to_completion` when the tick budget runs out."""

    TIMEOUT_FAILURE = "TimeoutFailure"


TIMEOUT_FAILURE = TimeoutFailure.TIMEOUT_FAILURE


@dataclass(frozen=True)
class BlackboardRef:
    """Unresolved ``{key}`` parameter; resolved against the blackboard at tick time."""

    key: str

    def __str__(self) -> str:
        return "{" + self.key + "}"


ParamValue = str | BlackboardRef


@dataclass(frozen=True)
class Node:
    id: str
    kind: str  # Sequence | Fallback | Parallel | Decorator | Action | Condition
    name: str  # XML tag: composite kind, decorator policy, or leaf name
    params: Mapping[str, ParamValue] = field(default_factory=dict)
    children: tuple[str, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.kind in ("Action", "Condition")

    @property
    def success_threshold(self) -> int:
        return int(self.params["success_threshold"])

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "name": self.name,
            "params": {k: str(v) for k, v in sorted(self.params.items())},
            "children": list(self.children),
        }


@dataclass(frozen=True)
class BehaviorTree:
    root: str
    nodes: Mapping[str, Node]
    source_digest: str = field(default="", compare=False)

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def walk(self, start: str | None = None) -> Iterator[Node]:
        """Preorder traversal."""
        stack = [start or self.root]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def parent_of(self, node_id: str) -> str | None:
        for node in self.nodes.values():
            if node_id in node.children:
                return node.id
        return None

    def ancestors(self, node_id: str) -> list[str]:
        """Parent chain, nearest first."""
        chain = []
        parent = self.parent_of(node_id)
        while parent is not None:
            chain.append(parent)
            parent = self.parent_of(parent)
        return chain

    def subtree_ids(self, node_id: str) -> list[str]:
        return [n.id for n in self.walk(node_id)]

    def leaves(self) -> list[Node]:
        return [n for n in self.walk() if n.is_leaf]

    def digest(self) -> str:
        return hashlib.sha256(serialize_bt(self).encode()).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {"root": self.root, "nodes": {nid: n.to_dict() for nid, n in sorted(self.nodes.items())}}


# -- validation ---------------------------------------------------------------


def _check_int(node: Node, key: str, low: int, allow_forever: bool = False) -> int:
    raw = node.params.get(key)
    if raw is None:
        raise SchemaError(f"{node.name} ({node.id}) requires attribute {key!r}")
    if isinstance(raw, BlackboardRef):
        raise SchemaError(f"{node.name} ({node.id}): {key} cannot reference the blackboard")
    try:
        value = int(raw)
    except ValueError:
        raise SchemaError(f"{node.name} ({node.id}): {key}={raw!r} is not an integer") from None
    if value < low and not (allow_forever and value == -1):
        raise SchemaError(f"{node.name} ({node.id}): {key}={value} out of range")
    return value


def validate_tree(root: str, nodes: Mapping[str, Node], space: StrategySpace = DEFAULT_SPACE) -> None:
    """Raise SchemaError / UnknownActionError unless (root, nodes) is a valid tree."""
    if root not in nodes:
        raise SchemaError(f"root {root!r} is not a node")
    seen: set[str] = set()
    stack = [root]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise SchemaError(f"node {nid!r} has more than one parent or lies on a cycle")
        seen.add(nid)
        node = nodes.get(nid)
        if node is None:
            raise SchemaError(f"reference to missing node {nid!r}")
        if node.id != nid:
            raise SchemaError(f"node key {nid!r} does not match its id {node.id!r}")
        _validate_node(node, space)
        stack.extend(node.children)
    orphans = set(nodes) - seen
    if orphans:
        raise SchemaError(f"nodes unreachable from root: {sorted(orphans)}")


def _validate_node(node: Node, space: StrategySpace) -> None:
    n = len(node.children)
    if node.kind in COMPOSITES:
        if node.name != node.kind:
            raise SchemaError(f"composite {node.id} has mismatched name {node.name!r}")
        if node.kind not in space.logic_space:
            raise SchemaError(f"{node.kind} is not in the logic space")
        if n < 1:
            raise SchemaError(f"{node.kind} ({node.id}) needs at least one child")
        allowed = {"success_threshold"} if node.kind == "Parallel" else set()
        extra = set(node.params) - allowed
        if extra:
            raise SchemaError(f"{node.kind} ({node.id}) has unknown attributes {sorted(extra)}")
        if node.kind == "Parallel":
            k = _check_int(node, "success_threshold", 1)
            if k > n:
                raise SchemaError(f"Parallel ({node.id}) success_threshold {k} exceeds {n} children")
    elif node.kind == "Decorator":
        if node.name not in DECORATORS or node.name not in space.logic_space:
            raise SchemaError(f"unknown decorator {node.name!r}")
        if n != 1:
            raise SchemaError(f"decorator {node.name} ({node.id}) needs exactly one child, has {n}")
        expected = set(DECORATOR_PARAMS[node.name])
        if set(node.params) != expected:
            raise SchemaError(f"{node.name} ({node.id}) takes attributes {sorted(expected)}")
        for key in expected:
            _check_int(node, key, 1, allow_forever=(node.name == "Repeat"))
    elif node.kind in ("Action", "Condition"):
        if n:
            raise SchemaError(f"leaf {node.name} ({node.id}) cannot have children")
        spec = space.leaf(node.name)
        if spec is None or spec.leaf != node.kind:
            raise UnknownActionError(f"{node.name!r} is not a registered {node.kind.lower()}")
        for key, value in node.params.items():
            pspec = spec.param(key)
            if pspec is None:
                raise SchemaError(f"{node.name} ({node.id}) has unknown parameter {key!r}")
            if pspec.type == "float" and isinstance(value, str):
                try:
                    float(value)
                except ValueError:
                    raise SchemaError(f"{node.name} ({node.id}): {key}={value!r} is not a number") from None
        for pspec in spec.params:
            if pspec.required and pspec.name not in node.params:
                raise SchemaError(f"{node.name} ({node.id}) is missing parameter {pspec.name!r}")
    else:
        raise SchemaError(f"unknown node kind {node.kind!r}")


# -- parsing --------------------------------------------------------------------


def _classify(tag: str, has_children: bool, space: StrategySpace) -> str:
    if not _TAG_RE.match(tag):
        raise SchemaError(f"node tag {tag!r} is not PascalCase")
    if tag in COMPOSITES:
        return tag
    if tag in DECORATORS:
        return "Decorator"
    spec = space.leaf(tag)
    if spec is not None:
        return spec.leaf
    if has_children:
        raise SchemaError(f"unknown control node <{tag}>")
    raise UnknownActionError(f"<{tag}> is not in the registered action space")


def param_value(raw: str) -> ParamValue:
    m = _REF_RE.match(raw.strip())
    if m:
        return BlackboardRef(m.group(1))
    return raw


def _unwrap_root(elem: ET.Element) -> ET.Element:
    if elem.tag == "root":
        trees = [c for c in elem if c.tag == "BehaviorTree"]
        if len(trees) != 1 or len(elem) != 1:
            raise SchemaError("<root> must contain exactly one <BehaviorTree>")
        elem = trees[0]
    if elem.tag == "BehaviorTree":
        if len(elem) != 1:
            raise SchemaError(f"<BehaviorTree> must contain exactly one root node, found {len(elem)}")
        extra = set(elem.attrib) - {"ID"}
        if extra:
            raise SchemaError(f"<BehaviorTree> has unknown attributes {sorted(extra)}")
        elem = elem[0]
    return elem


class _IdAllocator:
    def __init__(self, taken: set[str]):
        self.taken = set(taken)
        nums = [int(m.group(1)) for t in taken if (m := _ID_RE.match(t))]
        self.next = max(nums, default=-1) + 1

    def __call__(self) -> str:
        while f"n{self.next}" in self.taken:
            self.next += 1
        nid = f"n{self.next}"
        self.taken.add(nid)
        self.next += 1
        return nid


def _build(
    elem: ET.Element, space: StrategySpace, alloc: _IdAllocator, nodes: dict[str, Node], fresh_ids: bool
) -> str:
    if (elem.text or "").strip() or any((c.tail or "").strip() for c in elem):
        raise SchemaError(f"<{elem.tag}> contains stray text")
    kind = _classify(elem.tag, len(elem) > 0, space)
    attrs = dict(elem.attrib)
    explicit = attrs.pop("id", None)
    if explicit is not None and not fresh_ids:
        nid = explicit
    else:
        nid = alloc()
    if nid in nodes:
        raise SchemaError(f"duplicate node id {nid!r}")
    nodes[nid] = None  # type: ignore[assignment]  # reserve slot, keeps preorder ids stable
    children = tuple(_build(c, space, alloc, nodes, fresh_ids) for c in elem)
    params: dict[str, ParamValue] = {k: param_value(v) for k, v in attrs.items()}
    if kind == "Parallel" and "success_threshold" not in params:
        params["success_threshold"] = str(len(children))
    nodes[nid] = Node(id=nid, kind=kind, name=elem.tag, params=params, children=children)
    return nid


def _explicit_ids(elem: ET.Element) -> set[str]:
    return {e.attrib["id"] for e in elem.iter() if "id" in e.attrib}


def _parse_xml(xml_text: str) -> ET.Element:
    try:
        return ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise BTSyntaxError(f"malformed XML: {exc}") from None


def parse_bt(xml_text: str, space: StrategySpace = DEFAULT_SPACE) -> BehaviorTree:
    """Parse and validate an XML plan.

    Accepts ``<BehaviorTree>`` (optionally inside ``<root>``) or a bare node
    element. Nodes without an ``id`` attribute get ``n<k>`` ids in preorder.
    """
    elem = _unwrap_root(_parse_xml(xml_text))
    alloc = _IdAllocator(_explicit_ids(elem))
    nodes: dict[str, Node] = {}
    root = _build(elem, space, alloc, nodes, fresh_ids=False)
    validate_tree(root, nodes, space)
    return BehaviorTree(root=root, nodes=nodes, source_digest=hashlib.sha256(xml_text.encode()).hexdigest())


def parse_fragment(
    xml_text: str, taken_ids: set[str], space: StrategySpace = DEFAULT_SPACE
) -> tuple[str, dict[str, Node]]:
    """Parse a subtree for insertion into an existing tree; every node gets a fresh id."""
    elem = _unwrap_root(_parse_xml(xml_text))
    alloc = _IdAllocator(set(taken_ids))
    nodes: dict[str, Node] = {}
    root = _build(elem, space, alloc, nodes, fresh_ids=True)
    validate_tree(root, nodes, space)
    return root, nodes


# -- serialization ------------------------------------------------------------------


def _attrs(node: Node, include_ids: bool) -> str:
    items = {k: str(v) for k, v in node.params.items()}
    if include_ids:
        items["id"] = node.id
    return "".join(f' {k}="{escape(v, {chr(34): "&quot;"})}"' for k, v in sorted(items.items()))


def serialize_bt(tree: BehaviorTree, include_ids: bool = True) -> str:
    """Canonical XML: one ``<BehaviorTree>`` root, 2-space indent, sorted attributes."""
    lines = ["<BehaviorTree>"]

    def emit(nid: str, depth: int) -> None:
        node = tree.nodes[nid]
        pad = "  " * depth
        if not node.children:
            lines.append(f"{pad}<{node.name}{_attrs(node, include_ids)}/>")
            return
        lines.append(f"{pad}<{node.name}{_attrs(node, include_ids)}>")
        for child in node.children:
            emit(child, depth + 1)
        lines.append(f"{pad}</{node.name}>")

    emit(tree.root, 1)
    lines.append("</BehaviorTree>")
    return "\n".join(lines) + "\n"


def diff_trees(before: BehaviorTree, after: BehaviorTree) -> list[dict[str, Any]]:
    """Structural diff as a JSON-patch list over ``{"root", "nodes": {id: node}}``."""
    ops: list[dict[str, Any]] = []
    if before.root != after.root:
        ops.append({"op": "replace", "path": "/root", "value": after.root})
    for nid in sorted(set(before.nodes) - set(after.nodes)):
        ops.append({"op": "remove", "path": f"/nodes/{nid}"})
    for nid in sorted(set(after.nodes) - set(before.nodes)):
        ops.append({"op": "add", "path": f"/nodes/{nid}", "value": after.nodes[nid].to_dict()})
    for nid in sorted(set(before.nodes) & set(after.nodes)):
        old, new = before.nodes[nid].to_dict(), after.nodes[nid].to_dict()
        for key in ("kind", "name", "params", "children"):
            if old[key] != new[key]:
                ops.append({"op": "replace", "path": f"/nodes/{nid}/{key}", "value": new[key]})
    return ops


# -- execution --------------------------------------------------------------------


class Blackboard:
    """Mission-scoped key/value store read by ``{key}`` parameters."""

    def __init__(self, entries: Mapping[str, Any] | None = None):
        self.entries: dict[str, Any] = dict(entries or {})

    def __getitem__(self, key: str) -> Any:
        return self.entries[key]

    def __setitem__(self, key: str, value: Any) -> None:
        self.entries[key] = value

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def get(self, key: str, default: Any = None) -> Any:
        return self.entries.get(key, default)

    def resolve(self, node: Node) -> dict[str, Any]:
        out = {}
        for key, value in node.params.items():
            if isinstance(value, BlackboardRef):
                if value.key not in self.entries:
                    raise BlackboardKeyError(value.key, node.id)
                out[key] = self.entries[value.key]
            else:
                out[key] = value
        return out


class ActionExecutor(Protocol):
    def tick_leaf(self, node: Node, params: dict[str, Any], blackboard: Blackboard) -> TickStatus: ...

    def halt(self, node: Node) -> None: ...


class Ticker:
    """Holds per-node memory so Running children resume on the next tick."""

    def __init__(self, tree: BehaviorTree, blackboard: Blackboard, executor: ActionExecutor):
        self.tree = tree
        self.blackboard = blackboard
        self.executor = executor
        self.memory: dict[str, Any] = {}
        self._running: set[str] = set()

    def tick(self) -> TickStatus:
        return self._tick(self.tree.root)

    def halt(self) -> None:
        self._halt(self.tree.root)

    def _tick(self, nid: str) -> TickStatus:
        node = self.tree.nodes[nid]
        if node.is_leaf:
            return self._tick_leaf(node)
        if node.kind == "Sequence":
            return self._tick_ordered(node, stop_on=TickStatus.FAILURE)
        if node.kind == "Fallback":
            return self._tick_ordered(node, stop_on=TickStatus.SUCCESS)
        if node.kind == "Parallel":
            return self._tick_parallel(node)
        return self._tick_decorator(node)

    def _tick_leaf(self, node: Node) -> TickStatus:
        params = self.blackboard.resolve(node)
        try:
            status = self.executor.tick_leaf(node, params, self.blackboard)
        except (ExecutorFault, BlackboardKeyError):
            raise
        except Exception as exc:
            raise ExecutorFault(f"{node.name} ({node.id}) raised {exc!r}", node.id) from exc
        if not isinstance(status, TickStatus):
            raise ExecutorFault(f"{node.name} ({node.id}) returned {status!r}", node.id)
        if status is TickStatus.RUNNING:
            self._running.add(node.id)
        else:
            self._running.discard(node.id)
        return status

    def _tick_ordered(self, node: Node, stop_on: TickStatus) -> TickStatus:
        idx = self.memory.get(node.id, 0)
        while idx < len(node.children):
            status = self._tick(node.children[idx])
            if status is TickStatus.RUNNING:
                self.memory[node.id] = idx
                return status
            if status is stop_on:
                self.memory.pop(node.id, None)
                return status
            idx += 1
        self.memory.pop(node.id, None)
        return TickStatus.FAILURE if stop_on is TickStatus.SUCCESS else TickStatus.SUCCESS

    def _tick_parallel(self, node: Node) -> TickStatus:
        done: dict[int, TickStatus] = self.memory.setdefault(node.id, {})
        n, k = len(node.children), node.success_threshold
        for i, child in enumerate(node.children):
            if i in done:
                continue
            status = self._tick(child)
            if status is not TickStatus.RUNNING:
                done[i] = status
            successes = sum(1 for s in done.values() if s is TickStatus.SUCCESS)
            failures = len(done) - successes
            if successes >= k or failures > n - k:
                self._halt(node.id)
                return TickStatus.SUCCESS if successes >= k else TickStatus.FAILURE
        return TickStatus.RUNNING

    def _tick_decorator(self, node: Node) -> TickStatus:
        status = self._tick(node.children[0])
        if node.name == "Inverter":
            if status is TickStatus.RUNNING:
                return status
            return TickStatus.FAILURE if status is TickStatus.SUCCESS else TickStatus.SUCCESS
        if status is TickStatus.RUNNING:
            return status
        count = self.memory.get(node.id, 0) + 1
        if node.name == "Repeat":
            limit = int(node.params["num_cycles"])
            if status is TickStatus.FAILURE or (limit != -1 and count >= limit):
                self.memory.pop(node.id, None)
                return status
        else:  # RetryUntilSuccessful
            limit = int(node.params["num_attempts"])
            if status is TickStatus.SUCCESS or count >= limit:
                self.memory.pop(node.id, None)
                return status
        # yield between cycles so every cycle costs at least one tick
        self.memory[node.id] = count
        return TickStatus.RUNNING

    def _halt(self, nid: str) -> None:
        for node in self.tree.walk(nid):
            self.memory.pop(node.id, None)
            if node.id in self._running:
                self._running.discard(node.id)
                halt = getattr(self.executor, "halt", None)
                if halt is not None:
                    halt(node)


def tick(tree: BehaviorTree, bb: Blackboard, executor: ActionExecutor) -> TickStatus:
    """Single tick from a fresh state. Use :class:`Ticker` to resume across ticks."""
    return Ticker(tree, bb, executor).tick()


def run_to_completion(
    tree: BehaviorTree, bb: Blackboard, executor: ActionExecutor, max_ticks: int
) -> tuple[TickStatus | TimeoutFailure, int]:
    if max_ticks < 1:
        raise ValueError(f"max_ticks must be >= 1, got {max_ticks}")
    ticker = Ticker(tree, bb, executor)
    for count in range(1, max_ticks + 1):
        status = ticker.tick()
        if status is not TickStatus.RUNNING:
            return status, count
    ticker.halt()
    return TIMEOUT_FAILURE, max_ticks
